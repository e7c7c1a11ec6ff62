import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lazydino.prior import (Mesh, PriorError, anisotropy, apply_precision, build_prior, cm_inner,
                            neumann_laplacian, sample_prior)


def test_mesh_geometry():
    mesh = Mesh(4, 3)
    assert mesh.node_count == 20
    xy = mesh.coordinates()
    assert np.allclose(xy[mesh.index(4, 3)], [1.0, 1.0])
    assert np.allclose(xy[mesh.index(1, 2)], [0.25, 2 / 3])
    assert np.all(xy[mesh.boundary("bottom"), 1] == 0)
    assert np.all(xy[mesh.boundary("top"), 1] == 1)
    assert np.all(xy[mesh.boundary("left"), 0] == 0)
    assert np.all(xy[mesh.boundary("right"), 0] == 1)
    with pytest.raises(ValueError):
        Mesh(1, 4)


def test_isotropic_stencil_is_five_point():
    mesh = Mesh(6, 6)
    L = neumann_laplacian(mesh, np.eye(2))
    k = mesh.index(3, 3)
    h2 = mesh.hx * mesh.hy
    expected = {k: 4, mesh.index(2, 3): -1, mesh.index(4, 3): -1, mesh.index(3, 2): -1, mesh.index(3, 4): -1}
    row = L[k] * h2
    for j in range(mesh.node_count):
        assert row[j] == pytest.approx(expected.get(j, 0.0), abs=1e-12)
    assert np.allclose(L.sum(axis=1), 0, atol=1e-9)  # Neumann: constants in the kernel
    assert np.allclose(L, L.T)


def test_anisotropic_stencil_uses_diagonal_neighbours():
    mesh = Mesh(6, 6)
    L = neumann_laplacian(mesh, anisotropy(1.0, 0.4, 2.0))
    k = mesh.index(3, 3)
    assert np.count_nonzero(np.abs(L[k]) > 1e-12) == 9
    assert np.allclose(L, L.T)
    assert np.allclose(L.sum(axis=1), 0, atol=1e-9)


def test_default_coefficients_variance_scale_on_identity_mass_grid():
    # with mesh-scaled coefficients on the identity-mass grid the interior
    # marginal variance is O(1)
    mesh = Mesh(16, 16)
    prior = build_prior(mesh, 0.03 * mesh.h, 3.33 * mesh.h)
    var = np.diag(prior.covariance()).reshape(17, 17)[4:-4, 4:-4]
    assert 0.5 < var.mean() < 2.0


def test_gamma_zero_gives_scaled_identity():
    prior = build_prior(Mesh(5, 5), 0.0, 2.0)
    assert np.array_equal(prior.K, 2 * np.eye(36))
    X = sample_prior(prior, np.random.default_rng(0), 4000)
    assert np.var(X) == pytest.approx(0.25, rel=0.03)


def test_gamma_zero_delta_one_sample_is_white_noise():
    prior = build_prior(Mesh(4, 4), 0.0, 1.0)
    x = sample_prior(prior, np.random.default_rng(5), 1)[0]
    xi = np.random.default_rng(5).standard_normal((25, 1))[:, 0]
    assert np.allclose(x, xi, atol=1e-14)


def test_pointwise_variance_matches_dense_oracle():
    mesh = Mesh(16, 16)
    prior = build_prior(mesh, 0.03, 3.33)
    Kinv = np.linalg.inv(prior.K)
    var = np.diag(Kinv @ Kinv)
    X = sample_prior(prior, np.random.default_rng(0), 10_000)
    interior = np.setdiff1d(np.arange(prior.dim), np.concatenate(
        [mesh.boundary(s) for s in ("top", "bottom", "left", "right")]))
    rel = np.abs(X.var(axis=0)[interior] / var[interior] - 1)
    assert rel.max() < 0.05


def test_sample_covariance_converges():
    prior = build_prior(Mesh(16, 16), 0.03, 3.33)
    Kinv = np.linalg.inv(prior.K)
    C = Kinv @ Kinv
    errs = []
    for n in (2000, 20_000):
        X = sample_prior(prior, np.random.default_rng(11), n)
        errs.append(np.linalg.norm(np.cov(X, rowvar=False) - C) / np.linalg.norm(C))
    assert errs[1] < 0.10
    assert errs[1] < errs[0]


def test_sampling_is_deterministic_and_validates_n(prior8):
    a = sample_prior(prior8, np.random.default_rng(3), 1)
    b = sample_prior(prior8, np.random.default_rng(3), 1)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample_prior(prior8, np.random.default_rng(3), 0)


def test_not_spd_is_reported():
    with pytest.raises(PriorError, match="not SPD"):
        build_prior(Mesh(4, 4), 1.0, 1e-3, np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(PriorError):
        build_prior(Mesh(4, 4), 0.1, 0.0)


def test_apply_precision_examples(prior8):
    assert np.all(apply_precision(prior8, np.zeros(prior8.dim)) == 0)
    p3 = build_prior(Mesh(3, 3), 0.0, 3.0)
    m = np.random.default_rng(0).standard_normal(16)
    assert np.allclose(apply_precision(p3, m), 9 * m)
    m = np.random.default_rng(1).standard_normal(prior8.dim)
    dense = prior8.K @ prior8.K @ m
    assert np.allclose(apply_precision(prior8, m), dense, rtol=1e-12, atol=1e-12 * np.abs(dense).max())


def test_cm_inner_examples(prior8):
    z = np.zeros(prior8.dim)
    assert cm_inner(prior8, z, z) == 0
    p1 = build_prior(Mesh(3, 3), 0.0, 1.0)
    a, b = np.random.default_rng(2).standard_normal((2, 16))
    assert cm_inner(p1, a, b) == pytest.approx(a @ b, rel=1e-14)
    a, b = np.random.default_rng(3).standard_normal((2, prior8.dim))
    assert cm_inner(prior8, a, b) == pytest.approx(a @ prior8.K @ prior8.K @ b, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.1, 5.0))
def test_cm_inner_symmetric_positive(seed, gamma, delta):
    prior = build_prior(Mesh(4, 4), gamma, delta)
    a, b = np.random.default_rng(seed).standard_normal((2, prior.dim))
    assert cm_inner(prior, a, b) == pytest.approx(cm_inner(prior, b, a), rel=1e-12, abs=1e-12)
    assert cm_inner(prior, a, a) > 0
    lhs = apply_precision(prior, a) @ b
    assert lhs == pytest.approx(a @ apply_precision(prior, b), rel=1e-10, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-0.9, 0.9), st.floats(0.2, 3.0))
def test_prior_operator_symmetric_for_spd_anisotropy(a11, rho, a22):
    a12 = rho * np.sqrt(a11 * a22)
    prior = build_prior(Mesh(5, 4), 0.5, 1.0, anisotropy(a11, a12, a22))
    K = prior.K
    assert np.all(np.abs(K - K.T) <= 1e-12 * np.abs(K).max())
    assert np.all(np.linalg.eigvalsh(K) > 0)
