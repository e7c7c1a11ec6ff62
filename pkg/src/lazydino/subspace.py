"""Derivative-informed reduced basis and latent embedding of training data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import forward
from .prior import GaussianPrior


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    """``C^{-1}``-orthonormal basis ``psi_j`` with encoder ``E = D^T K^2``."""

    decoder: np.ndarray  # (n, d_r)
    encoder: np.ndarray  # (d_r, n)
    eigenvalues: np.ndarray  # (d_r,)
    tail_sum: float
    spectrum: np.ndarray | None = None

    @property
    def d_r(self) -> int:
        return self.decoder.shape[1]

    def encode(self, m: np.ndarray) -> np.ndarray:
        """``E m`` for one field or for each row of a batch."""
        return np.asarray(m) @ self.encoder.T

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.decoder.T

    def project(self, m: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(m))


def basis_from_decoder(prior: GaussianPrior, decoder: np.ndarray, eigenvalues=None, tail_sum=0.0, spectrum=None):
    decoder = np.asarray(decoder, dtype=float)
    encoder = (prior.K @ (prior.K @ decoder)).T
    eigenvalues = np.zeros(decoder.shape[1]) if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
    return ReducedBasis(decoder, encoder, eigenvalues, float(tail_sum), spectrum)


@dataclass(frozen=True)
class DataWhitener:
    """``V = sigma I`` so that ``V^* = sigma^{-1} I`` whitens the data space."""

    sigma: float
    d_y: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def whiten(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(g) / self.sigma

    def unwhiten(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(g) * self.sigma


@dataclass(eq=False)
class EmbeddedDataset:
    inputs: np.ndarray  # (N, d_r)
    outputs: np.ndarray  # (N, d_y)
    jacobians: np.ndarray | None = None  # (N, d_y, d_r)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        if len(self.inputs) != len(self.outputs):
            raise ValueError("inputs and outputs differ in length")
        if self.jacobians is not None:
            self.jacobians = np.asarray(self.jacobians, dtype=float)
            if self.jacobians.shape != (len(self.inputs), self.outputs.shape[1], self.inputs.shape[1]):
                raise ValueError(f"jacobians have shape {self.jacobians.shape}")
        for a in (self.inputs, self.outputs, self.jacobians):
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("dataset contains non-finite entries")

    @property
    def N(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> EmbeddedDataset:
        J = None if self.jacobians is None else self.jacobians[idx]
        return EmbeddedDataset(self.inputs[idx], self.outputs[idx], J)


def estimate_gn_hessian(prior: GaussianPrior, cfg: forward.PdeConfig, n_samples: int,
                        rng: np.random.Generator, return_samples: bool = False,
                        return_half: bool = False):
    """Monte Carlo estimate of ``E_mu[J^T Gamma^{-1} J]`` over prior samples.

    With ``return_samples`` the prior draws and their PtO values are returned
    too, so they can be reused as training data.  With ``return_half`` the
    estimate from the first half of the draws is appended, for use with
    :func:`eigenvalue_stability`.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    ms, G, _ = forward.generate_samples(cfg, prior, rng, n_samples)
    H = np.zeros((prior.dim, prior.dim))
    half = max(n_samples // 2, 1)
    H_half = None
    for i, m in enumerate(ms):
        J = forward.full_jacobian(cfg, m)
        H += J.T @ J
        if i + 1 == half:
            H_half = H / (half * cfg.noise_variance)
    H /= n_samples * cfg.noise_variance
    H = 0.5 * (H + H.T)
    out = (H,)
    if return_samples:
        out += (ms, G)
    if return_half:
        out += (0.5 * (H_half + H_half.T),)
    return out if len(out) > 1 else H


def eigenvalue_stability(prior: GaussianPrior, H: np.ndarray, H_half: np.ndarray, k: int = 1) -> float:
    """Relative change of the ``k`` leading generalized eigenvalues between two Hessian estimates."""
    a = solve_gevp(prior, H, k).eigenvalues
    b = solve_gevp(prior, H_half, k).eigenvalues
    return float(np.max(np.abs(a - b) / np.abs(a)))


def solve_gevp(prior: GaussianPrior, H: np.ndarray, d_r: int) -> ReducedBasis:
    """Leading generalized eigenpairs of ``H psi = lambda C^{-1} psi``.

    Uses the symmetric reduction ``K^{-1} H K^{-1} v = lambda v``, ``psi = K^{-1} v``.
    """
    n = prior.dim
    if not 1 <= d_r <= n:
        raise ValueError(f"d_r must lie in [1, {n}], got {d_r}")
    Kinv = prior.solve_K(np.eye(n))
    M = Kinv @ H @ Kinv
    M = 0.5 * (M + M.T)
    try:
        lam, V = linalg.eigh(M)
    except linalg.LinAlgError as exc:
        raise RuntimeError("eigensolver did not converge") from exc
    lam, V = lam[::-1], V[:, ::-1]
    # fix the sign of each eigenvector for reproducibility
    V = V * np.where(V[np.abs(V).argmax(axis=0), np.arange(n)] < 0, -1.0, 1.0)
    decoder = prior.solve_K(V[:, :d_r])
    return basis_from_decoder(prior, decoder, lam[:d_r], lam[d_r:].sum(), lam)


def embed_dataset(basis: ReducedBasis, whitener: DataWhitener, ms: np.ndarray, G: np.ndarray,
                  jacobians: np.ndarray | None = None) -> EmbeddedDataset:
    """Latent inputs ``E m``, whitened outputs ``G / sigma``, latent Jacobians as given."""
    ms = np.atleast_2d(ms)
    G = np.atleast_2d(G)
    if ms.shape[1] != basis.decoder.shape[0]:
        raise ValueError(f"fields have {ms.shape[1]} nodes, basis expects {basis.decoder.shape[0]}")
    if G.shape[1] != whitener.d_y:
        raise ValueError(f"outputs have dimension {G.shape[1]}, expected {whitener.d_y}")
    if jacobians is not None and jacobians.shape[1:] != (whitener.d_y, basis.d_r):
        raise ValueError(f"jacobians have shape {jacobians.shape[1:]}, expected {(whitener.d_y, basis.d_r)}")
    return EmbeddedDataset(basis.encode(ms), whitener.whiten(G), jacobians)


def lift(basis: ReducedBasis, prior: GaussianPrior, z: np.ndarray, rng: np.random.Generator | None = None,
         fill: str = "prior_complement", m_pr: np.ndarray | None = None) -> np.ndarray:
    """Map latent vectors back to fields: ``D z + (m_pr - P m_pr)`` or ``D z`` for zero fill."""
    z = np.asarray(z, dtype=float)
    m = basis.decode(z)
    if fill == "zero":
        return m
    if fill != "prior_complement":
        raise ValueError(f"unknown fill {fill!r}")
    if m_pr is None:
        n = 1 if z.ndim == 1 else len(z)
        m_pr = prior.sample(rng, n)
        if z.ndim == 1:
            m_pr = m_pr[0]
    return m + m_pr - basis.project(m_pr)
