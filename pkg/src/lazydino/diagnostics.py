"""Posterior error measures: moment discrepancies and density-based diagnostics.

Density diagnostics use ``Phi_T = log d mu / d(T_# mu)``.  The posterior
weight relative to the pushforward is ``exp(-Phi + Phi_T)`` (up to the
evidence); ``exponent=2`` reproduces the alternative doubled-exponent form.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import logsumexp

from . import forward as fwd
from .transport import pushforward_log_ratio, pushforward_mode

logger = logging.getLogger(__name__)


@dataclass
class MomentReport:
    E_mean: float
    E_cov: float
    E_skew: float
    k_skew: int


@dataclass
class DensityReport:
    E_rKL: float
    E_fKL: float
    ESS_N_percent: float
    E_MAP: float
    N: int


REPORT_COLUMNS = ["method", "n_train", "bip"] + [f.name for f in fields(MomentReport)] + \
    [f.name for f in fields(DensityReport)]


def _check_samples(X, name):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 10:
        raise ValueError(f"{name}: need at least 10 samples")
    return X


def standardized_skewness(Z: np.ndarray) -> np.ndarray:
    """Third standardized central moment tensor of the columns of ``Z``."""
    Zc = Z - Z.mean(axis=0)
    Zs = Zc / Zc.std(axis=0)
    return np.einsum("ni,nj,nk->ijk", Zs, Zs, Zs) / len(Z)


def moment_errors(approx: np.ndarray, reference: np.ndarray, basis=None, k_skew: int = 10) -> MomentReport:
    """Relative mean, covariance and leading-latent skewness errors, in percent."""
    A = _check_samples(approx, "approx")
    R = _check_samples(reference, "reference")
    mean_a, mean_r = A.mean(axis=0), R.mean(axis=0)
    E_mean = 100 * np.linalg.norm(mean_a - mean_r) / np.linalg.norm(mean_r)
    cov_a, cov_r = np.cov(A, rowvar=False), np.cov(R, rowvar=False)
    E_cov = 100 * np.linalg.norm(cov_a - cov_r) / np.linalg.norm(cov_r)
    E_skew = float("nan")
    k = 0
    if basis is not None:
        k = min(k_skew, basis.d_r)
        Sa = standardized_skewness(basis.encode(A)[:, :k])
        Sr = standardized_skewness(basis.encode(R)[:, :k])
        E_skew = 100 * np.linalg.norm(Sa - Sr) / np.linalg.norm(Sr)
    return MomentReport(float(E_mean), float(E_cov), float(E_skew), k)


def log_importance_weights(phi: np.ndarray, phi_T: np.ndarray, exponent: float = 1.0) -> np.ndarray:
    return exponent * (-np.asarray(phi, dtype=float) + np.asarray(phi_T, dtype=float))


def importance_weights(phi: np.ndarray, phi_T: np.ndarray, exponent: float = 1.0):
    """Unnormalized weights ``exp(-Phi + Phi_T)`` and weights normalized to mean one.

    The normalization is done in log space so it never underflows.
    """
    lw = log_importance_weights(phi, phi_T, exponent)
    w = np.exp(lw - (logsumexp(lw) - np.log(len(lw))))
    return np.exp(lw), w


def ess_percent(weights, log: bool = False) -> float:
    """``(sum w)^2 / (N sum w^2) * 100`` evaluated in log space."""
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        raise ValueError("no weights")
    with np.errstate(divide="ignore"):
        lw = weights if log else np.log(weights)
    return float(100 * np.exp(2 * logsumexp(lw) - logsumexp(2 * lw) - np.log(len(lw))))


def kl_estimates(phi: np.ndarray, phi_T: np.ndarray, w: np.ndarray):
    """Shifted rKL ``E_T[Phi - Phi_T]`` and shifted ANIS fKL ``E_T[w (-Phi + Phi_T)]``.

    Both omit the unknown ``log Z``: the true values are the rKL plus
    ``log Z`` and the fKL minus ``log Z``.
    """
    phi, phi_T, w = (np.asarray(a, dtype=float) for a in (phi, phi_T, w))
    return float(np.mean(phi - phi_T)), float(np.mean(w * (-phi + phi_T)))


def potentials(cfg: fwd.PdeConfig, y: np.ndarray, ms: np.ndarray) -> np.ndarray:
    """``Phi`` at each row of ``ms``; ``inf`` where the forward solve fails."""
    out = np.empty(len(ms))
    for k, m in enumerate(ms):
        try:
            out[k] = fwd.potential(cfg, y, m)
        except fwd.PdeError:
            out[k] = np.inf
    return out


def pushforward_map_estimate(model, basis, m_map: np.ndarray | None, rng: np.random.Generator,
                             n_starts: int = 64):
    """Zero-filled decode of the pushforward mode and its relative error (percent) against ``m_map``."""
    x_star, _, converged = pushforward_mode(model, rng, n_starts)
    if not converged:
        logger.warning("pushforward mode search did not converge; reporting the best point found")
    m = basis.decode(x_star)
    err = float("nan")
    if m_map is not None:
        err = 100 * float(np.linalg.norm(m - m_map) / np.linalg.norm(m_map))
    return m, err, converged


def density_report(phi: np.ndarray, phi_T: np.ndarray, E_MAP: float = float("nan"),
                   exponent: float = 1.0) -> DensityReport:
    lw = log_importance_weights(phi, phi_T, exponent)
    finite = np.isfinite(phi)
    _, w = importance_weights(phi[finite], phi_T[finite], exponent)
    rkl, fkl = kl_estimates(phi[finite], phi_T[finite], w)
    return DensityReport(rkl, fkl, ess_percent(lw[finite], log=True), E_MAP, int(finite.sum()))


def transport_density_report(model, basis, prior, cfg, y, n: int, rng: np.random.Generator,
                             m_map=None, fill: str = "prior_complement", exponent: float = 1.0):
    """Density diagnostics of a lazy map from ``n`` pushforward samples with their origins."""
    from .transport import push_samples

    ms, Z, _, _ = push_samples(model, basis, prior, n, rng, fill, return_latent=True)
    phi = potentials(cfg, y, ms)
    phi_T = pushforward_log_ratio(model, Z)
    E_MAP = float("nan")
    if m_map is not None:
        E_MAP = pushforward_map_estimate(model, basis, m_map, rng)[1]
    return density_report(phi, phi_T, E_MAP, exponent), ms


def split_rhat(chains) -> np.ndarray:
    """Split-R-hat per coordinate for chains of shape ``(n_chains, n, d)``."""
    chains = np.asarray(chains, dtype=float)
    half = chains.shape[1] // 2
    split = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    n = split.shape[1]
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var = (n - 1) / n * W + B / n
    return np.sqrt(var / W)


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Standard error of the mean of each column by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    size = len(x) // n_batches
    means = x[: size * n_batches].reshape(n_batches, size, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def report_row(method: str, n_train, bip, moments: MomentReport | None, density: DensityReport | None) -> dict:
    row = {c: float("nan") for c in REPORT_COLUMNS}
    row.update(method=method, n_train=n_train, bip=bip)
    if moments is not None:
        row.update(asdict(moments))
    if density is not None:
        row.update(asdict(density))
    return row
