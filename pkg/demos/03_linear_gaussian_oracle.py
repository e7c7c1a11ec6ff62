"""A lazy map on a linear-Gaussian problem, checked against the exact posterior.

With a linear forward operator the posterior is Gaussian and known in closed
form.  The data inform only a handful of directions, so a lazy map on the
leading latent coordinates can be exact.  We train one against an exact
linear surrogate and compare its pushforward moments, the Laplace
approximation and a pCN chain against the analytic answer.

Run:  python demos/03_linear_gaussian_oracle.py   (about a minute)
"""
import logging

import numpy as np

from lazydino import baselines as bl
from lazydino import diagnostics as dg
from lazydino import forward as fwd
from lazydino import surrogate as sg
from lazydino import transport as tr
from lazydino.io import load_config
from lazydino.pipeline import build_problem
from lazydino.subspace import solve_gevp

logging.basicConfig(level=logging.INFO, format="%(message)s")
log = logging.getLogger("demo")

cfg = load_config(overrides={"prior": {"nx": 8, "ny": 8}, "subspace": {"d_r": 8},
                             "model": {"mode": "linear_test", "d_y": 8}})
prior, pde = build_problem(cfg)
y = fwd.synthesize_observation(pde, prior.sample(np.random.default_rng(1), 1)[0], np.random.default_rng(2))

# closed-form posterior
C = prior.covariance()
B, s2 = pde.B, pde.noise_variance
post_cov = np.linalg.inv(np.linalg.inv(C) + B.T @ B / s2)
post_mean = post_cov @ B.T @ y / s2

basis = solve_gevp(prior, B.T @ B / s2, 8)
mu_z, S_z = basis.encode(post_mean), basis.encoder @ post_cov @ basis.encoder.T

la = bl.build_laplace(pde, prior, y)
log.info("Laplace: MAP error %.1e, covariance error %.1e",
         np.linalg.norm(la.map_point - post_mean) / np.linalg.norm(post_mean),
         np.linalg.norm(la.cov - post_cov) / np.linalg.norm(post_cov))

surrogate = sg.MlpSurrogate.linear(B @ basis.decoder / pde.sigma)
model = tr.IafMap.initialize(8, 8, (64, 64), np.random.default_rng(3))
model, trace = tr.train_lazy_map(model, tr.surrogate_objective(surrogate, y / pde.sigma),
                                 tr.StageSchedule(), np.random.default_rng(4))
log.info("lazy map loss: %.2f -> %.2f over %d iterations", trace.loss[0], trace.loss[-1], len(trace.loss))

X, _ = model.forward(np.random.default_rng(5).standard_normal((50_000, 8)))
log.info("pushforward latent mean error %.2f%%, covariance error %.2f%%",
         100 * np.linalg.norm(X.mean(0) - mu_z) / np.linalg.norm(mu_z),
         100 * np.linalg.norm(np.cov(X, rowvar=False) - S_z) / np.linalg.norm(S_z))

rep, _ = dg.transport_density_report(model, basis, prior, pde, y, 20_000, np.random.default_rng(6))
log.info("importance-sampling ESS: %.1f%%, shifted rKL %.3f", rep.ESS_N_percent, rep.E_rKL)

chain = bl.pcn_sample(pde, prior, y, 40_000, 0.05, 5_000, 5, np.random.default_rng(7), m0=post_mean)
Zc = basis.encode(chain.samples)
log.info("pCN acceptance %.2f; latent mean error %.2f%%", chain.acceptance_rate,
         100 * np.linalg.norm(Zc.mean(0) - mu_z) / np.linalg.norm(mu_z))
