import numpy as np
import pytest

from lazydino import forward as fwd
from lazydino.prior import Mesh, build_prior


def scaled_prior(n, gamma=0.03, delta=3.33, A=None):
    mesh = Mesh(n, n)
    return build_prior(mesh, gamma * mesh.h, delta * mesh.h, A)


def linear_problem(n=8, d_y=8, sigma2=1.94e-3, seed=7):
    """Prior and linear_test config with a dense Gaussian observation matrix."""
    prior = scaled_prior(n)
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((d_y, prior.dim)) / np.sqrt(prior.dim)
    cfg = fwd.PdeConfig(prior.mesh, np.arange(d_y), sigma2, "linear_test", B)
    return prior, cfg


def analytic_posterior(prior, cfg, y):
    """Conjugate Gaussian posterior mean and covariance of the linear model."""
    B, s2 = cfg.B, cfg.noise_variance
    P = B.T @ B / s2 + prior.K @ prior.K
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + cov.T)
    return cov @ (B.T @ y / s2), cov


def fd_directional(f, x, d, eps=1e-6):
    return (f(x + eps * d) - f(x - eps * d)) / (2 * eps)


@pytest.fixture(scope="session")
def prior8():
    return scaled_prior(8)


@pytest.fixture(scope="session")
def pde8(prior8):
    return fwd.PdeConfig(prior8.mesh, fwd.default_obs_points(prior8.mesh), 1.94e-3)


@pytest.fixture(scope="session")
def linear8():
    return linear_problem()
