"""The offline/online workflow through the command layer.

Everything the CLI does is available as ``pipeline.cmd_*`` functions.  This
script draws a synthetic observation, runs the offline phase (basis, data,
surrogate), trains the online lazy map, builds the true-model lazy map,
Laplace and pCN baselines and writes a comparison report, all into a
temporary directory.  It uses a 10 x 10 grid and shortened schedules so that
it finishes in a few minutes.

Read the report with care.  The pCN reference here is short, and the similar
covariance errors of all three methods largely reflect its own Monte Carlo
error.  With d_r = 8 instead of 20
both lazy maps leave data-informed directions at the prior and their mean
error more than doubles.  The gap between the online (surrogate-driven) and
true-model lazy maps is the price of a 256-sample surrogate.

Equivalent shell session::

    lazydino prior-sample --config cfg.yaml --out run/obs --observe
    lazydino offline --config cfg.yaml --out run/offline
    lazydino online  --config cfg.yaml --out run/online --offline run/offline --y run/obs/observation --samples 2000
    lazydino lazymap --config cfg.yaml --out run/lazymap --offline run/offline --y run/obs/observation --samples 2000
    lazydino laplace --config cfg.yaml --out run/la --y run/obs/observation
    lazydino mcmc    --config cfg.yaml --out run/mcmc --y run/obs/observation --offline run/offline
    lazydino diagnose --config cfg.yaml --out run/report --y run/obs/observation \\
        --method online=run/online/samples --method lazymap=run/lazymap/samples --method laplace=run/la/samples \\
        --reference run/mcmc/samples --offline run/offline --map-reference run/la/laplace

Run:  python demos/04_end_to_end_pipeline.py
"""
import logging
import tempfile
from pathlib import Path

from lazydino import pipeline
from lazydino.io import load_config

logging.basicConfig(level=logging.INFO, format="%(message)s")
log = logging.getLogger("demo")

cfg = load_config(overrides={
    "seed": 3,
    "prior": {"nx": 10, "ny": 10},
    "subspace": {"d_r": 20, "n_basis_samples": 256},
    "surrogate": {"n_train": 256, "n_test": 64, "arch": [64, 64], "epochs": 300,
                  "schedule": [[225, 1.0e-3], [75, 3.0e-4]]},
    "transport": {"layers": 6, "widths": [64, 64], "stages": [[2000, 128, 5.0e-3], [500, 512, 5.0e-4]]},
    "baselines": {"pcn": {"n": 10000, "burn_in": 2000, "thin": 5},
                  "lazymap": {"stages": [[300, 32, 5.0e-3], [100, 128, 5.0e-4]]}},
    "diagnostics": {"n_eval": 2000},
})

with tempfile.TemporaryDirectory() as tmp:
    run = Path(tmp)
    pipeline.cmd_prior_sample(cfg, run / "obs", 1, observe=True)
    y = run / "obs" / "observation"
    pipeline.cmd_offline(cfg, run / "offline")
    errors = pipeline.read_csv(run / "offline" / "surrogate_errors.csv")[0]
    log.info("surrogate (%s, N=%s): E_g=%.4f E_grad_g=%.4f", errors["objective"], errors["n_train"],
             float(errors["E_g"]), float(errors["E_grad_g"]))
    pipeline.cmd_online(cfg, run / "offline", y, run / "online", n_samples=2000)
    pipeline.cmd_laplace(cfg, y, run / "la", n_samples=2000)
    # the same lazy map trained on the true forward model: slower, but free of surrogate error
    pipeline.cmd_lazymap(cfg, y, run / "lazymap", offline=run / "offline", n_samples=2000)
    pipeline.cmd_mcmc(cfg, y, run / "mcmc", offline=run / "offline")
    rhat = pipeline.read_csv(run / "mcmc" / "mcmc_rhat.csv")[0]
    log.info("pCN split R-hat (%s coordinates): %.3f", rhat["coordinates"], float(rhat["max_split_rhat"]))
    pipeline.cmd_diagnose(cfg, y, {"online": run / "online" / "samples", "lazymap": run / "lazymap" / "samples",
                           "laplace": run / "la" / "samples"},
                          run / "mcmc" / "samples", run / "report", offline=run / "offline",
                          map_reference=run / "la" / "laplace")
    for row in pipeline.read_csv(run / "report" / "report.csv"):
        log.info("%-8s E_mean=%6.2f%% E_cov=%6.2f%% rKL=%8.3f ESS=%5.1f%%", row["method"],
                 float(row["E_mean"]), float(row["E_cov"]), float(row["E_rKL"]), float(row["ESS_N_percent"]))
