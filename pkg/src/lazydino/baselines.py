"""Laplace approximation and pCN reference sampler."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import forward as fwd
from .prior import GaussianPrior
from .subspace import solve_gevp

logger = logging.getLogger(__name__)


class BaselineError(RuntimeError):
    pass


def _objective(cfg, prior, y, m):
    """Negative log-posterior ``Phi(m) + 0.5 ||m||^2_{C^{-1}}``; ``inf`` if the solve fails."""
    try:
        phi = fwd.potential(cfg, y, m)
    except fwd.PdeError:
        return np.inf
    Km = prior.K @ m
    return phi + 0.5 * float(Km @ Km)


def find_map(cfg: fwd.PdeConfig, prior: GaussianPrior, y: np.ndarray, max_iters: int = 100,
             m0: np.ndarray | None = None, gtol: float = 1e-8, return_info: bool = False):
    """Gauss-Newton with Armijo backtracking for the MAP point.

    Stops once ``sqrt(g^T C g) <= gtol`` where ``g`` is the Euclidean gradient
    of the negative log-posterior.
    """
    m = np.zeros(prior.dim) if m0 is None else np.array(m0, dtype=float)
    K2 = prior.K @ prior.K
    info = dict(iterations=0, grad_norm=np.inf)
    for it in range(max_iters + 1):
        state = None if cfg.mode == "linear_test" else fwd.solve_pde(cfg, m)
        r = fwd.pto(cfg, m, state) - y
        J = fwd.full_jacobian(cfg, m, state)
        g = J.T @ r / cfg.noise_variance + K2 @ m
        gnorm = float(np.linalg.norm(prior.solve_K(g)))
        info.update(iterations=it, grad_norm=gnorm)
        if gnorm <= gtol:
            return (m, info) if return_info else m
        if it == max_iters:
            break
        H = J.T @ J / cfg.noise_variance + K2
        p = -linalg.cho_solve(linalg.cho_factor(H), g)
        f0 = 0.5 * float(r @ r) / cfg.noise_variance + 0.5 * float(m @ K2 @ m)
        slope = float(g @ p)
        step = 1.0
        for _ in range(50):
            trial = m + step * p
            if _objective(cfg, prior, y, trial) <= f0 + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            # no representable decrease left: accept only if already at round-off level
            if gnorm <= 1e3 * gtol:
                return (m, info) if return_info else m
            raise BaselineError("MAP not converged (line search failed)")
        m = trial
    raise BaselineError(f"MAP not converged after {max_iters} iterations (gradient norm {gnorm:.3e})")


@dataclass(eq=False)
class LaplaceModel:
    map_point: np.ndarray
    eigvals: np.ndarray  # (d_LA,)
    decoder: np.ndarray  # (n, d_LA)
    encoder: np.ndarray  # (d_LA, n)
    cov: np.ndarray
    chol: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.eigvals)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        xi = rng.standard_normal((len(self.map_point), n))
        return (self.map_point[:, None] + self.chol @ xi).T


def build_laplace(cfg: fwd.PdeConfig, prior: GaussianPrior, y: np.ndarray, d_LA: int | None = None,
                  m_map: np.ndarray | None = None) -> LaplaceModel:
    """Gaussian ``N(m_MAP, C_LA)`` with ``C_LA = C - D diag(lambda/(lambda+1)) E C``.

    ``d_LA`` defaults to the number of eigenvalues above ``1e-6 * lambda_1``.
    """
    if m_map is None:
        m_map = find_map(cfg, prior, y)
    J = fwd.full_jacobian(cfg, m_map)
    H = J.T @ J / cfg.noise_variance
    full = solve_gevp(prior, H, prior.dim)
    lam = full.spectrum
    if d_LA is None:
        d_LA = int(np.sum(lam > 1e-6 * lam[0])) if lam[0] > 0 else 0
    D = full.decoder[:, :d_LA]
    E = full.encoder[:d_LA]
    lam = np.clip(lam[:d_LA], 0.0, None)
    C = prior.covariance()
    # E C = D^T for a C^{-1}-orthonormal basis
    cov = C - (D * (lam / (lam + 1.0))) @ D.T
    cov = 0.5 * (cov + cov.T)
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise BaselineError("LA covariance indefinite") from exc
    return LaplaceModel(np.asarray(m_map, dtype=float), lam, D, E, cov, chol)


def laplace_log_ratio(la: LaplaceModel, prior: GaussianPrior, m: np.ndarray):
    """``log d mu_LA / d mu`` at ``m`` (one field or rows of a batch), from the low-rank closed form."""
    m = np.asarray(m, dtype=float)
    lam = la.eigvals
    m_map = la.map_point
    Kmap = prior.K @ m_map
    Em = m @ la.encoder.T
    Emap = la.encoder @ m_map
    Km = m @ prior.K.T
    return (-0.5 * float(Kmap @ Kmap)
            - 0.5 * float(Emap @ (lam * Emap))
            + Em @ (lam * Emap)
            + Km @ Kmap
            + 0.5 * float(np.sum(np.log1p(lam)))
            - 0.5 * np.sum(lam * Em * Em, axis=-1))


@dataclass(eq=False)
class McmcChain:
    samples: np.ndarray
    acceptance_rate: float
    beta: float
    length: int
    failed_proposals: int = 0


def pcn_sample(cfg: fwd.PdeConfig | None, prior: GaussianPrior, y: np.ndarray | None, n: int, beta: float,
               burn_in: int, thin: int, rng: np.random.Generator, m0: np.ndarray | None = None,
               adapt: bool = False, potential=None, block: int = 1000) -> McmcChain:
    """Preconditioned Crank-Nicolson Metropolis chain.

    Proposal ``m' = sqrt(1 - beta^2) m + beta xi`` with ``xi`` from the prior,
    accepted with probability ``min(1, exp(Phi(m) - Phi(m')))``.  With
    ``adapt`` the step is tuned toward 25% acceptance during burn-in only.
    ``potential`` overrides ``Phi`` (e.g. ``lambda m: 0.0`` samples the prior).
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if n < 1 or thin < 1 or burn_in < 0:
        raise ValueError("need n >= 1, thin >= 1, burn_in >= 0")
    if potential is None:
        def potential(m):
            return fwd.potential(cfg, y, m)
    m = prior.sample(rng, 1)[0] if m0 is None else np.array(m0, dtype=float)
    phi = potential(m)
    total = burn_in + n * thin
    samples = np.empty((n, prior.dim))
    accepted = window_acc = failed = 0
    draws = None
    for it in range(total):
        if it % block == 0:
            draws = prior.sample(rng, min(block, total - it))
            log_u = np.log(rng.uniform(size=len(draws)))
        k = it % block
        prop = np.sqrt(1.0 - beta**2) * m + beta * draws[k]
        try:
            phi_prop = potential(prop)
        except fwd.PdeError:
            failed += 1
            phi_prop = np.inf
        if log_u[k] < phi - phi_prop:
            m, phi = prop, phi_prop
            window_acc += 1
            if it >= burn_in:
                accepted += 1
        if adapt and it < burn_in and (it + 1) % 100 == 0:
            beta = float(np.clip(beta * np.exp(window_acc / 100 - 0.25), 1e-3, 0.999))
            window_acc = 0
        elif not adapt and (it + 1) % 100 == 0:
            window_acc = 0
        if it >= burn_in and (it - burn_in + 1) % thin == 0:
            samples[(it - burn_in) // thin] = m
    rate = accepted / (n * thin)
    return McmcChain(samples, rate, beta, n, failed)
