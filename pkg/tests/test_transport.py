import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lazydino import forward as fwd
from lazydino import transport as tr
from lazydino.prior import cm_inner
from lazydino.subspace import basis_from_decoder, solve_gevp
from lazydino.surrogate import MlpSurrogate

from conftest import fd_directional, linear_problem


def random_iaf(dim=4, seed=0, layers=3, hidden=(8, 8), scale=0.3):
    rng = np.random.default_rng(seed)
    model = tr.IafMap.initialize(dim, layers, hidden, rng)
    model.params[...] = scale * rng.standard_normal(model.n_params)
    return model


def numerical_jacobian(f, z, eps=1e-6):
    return np.column_stack([fd_directional(f, z, e, eps) for e in np.eye(len(z))])


@pytest.fixture(scope="module")
def linear_setup():
    prior, cfg = linear_problem()
    H = cfg.B.T @ cfg.B / cfg.noise_variance
    basis = solve_gevp(prior, H, 8)
    y = fwd.synthesize_observation(cfg, prior.sample(np.random.default_rng(1), 1)[0], np.random.default_rng(2))
    exact = MlpSurrogate.linear(cfg.B @ basis.decoder / cfg.sigma)
    return prior, cfg, basis, y, exact


def test_identity_initialization_is_exact():
    model = tr.IafMap.initialize(5, 4, (16, 16), np.random.default_rng(0))
    Z = np.random.default_rng(1).standard_normal((7, 5))
    X, ld = model.forward(Z)
    assert np.array_equal(X, Z) and np.all(ld == 0)
    assert np.all(tr.pushforward_log_ratio(model, Z) == 0)


def test_single_layer_constant_shift():
    model = tr.IafMap(1, 1, (4,))
    W, b = model.layer_weights(model.params)[0][-1]
    b[...] = [2.0, 0.0]
    z = np.array([[0.3], [-1.2]])
    X, ld = model.forward(z)
    assert np.allclose(X, z + 2) and np.all(ld == 0)


@pytest.mark.parametrize("dim", [1, 2, 4, 6])
def test_logdet_matches_numerical_determinant(dim):
    model = random_iaf(dim, seed=dim)
    z = np.random.default_rng(10 + dim).standard_normal(dim)
    J = numerical_jacobian(lambda v: model.forward(v)[0], z)
    _, ld = model.forward(z)
    assert np.exp(ld) == pytest.approx(np.linalg.det(J), rel=1e-8)


def test_autoregressive_probe_all_layers():
    model = random_iaf(5, seed=3, layers=4, scale=1.0)
    rng = np.random.default_rng(4)
    for layer in range(model.n_layers):
        U = rng.standard_normal((1, 5))
        mu0, s0 = model.conditioner(layer, U)
        for k in range(5):
            V = U.copy()
            V[0, k] += 1.7
            mu1, s1 = model.conditioner(layer, V)
            assert np.array_equal(mu1[0, :k + 1], mu0[0, :k + 1])
            assert np.array_equal(s1[0, :k + 1], s0[0, :k + 1])
            if k < 4:
                assert not np.array_equal(mu1[0, k + 1:], mu0[0, k + 1:])


def test_identity_map_zero_surrogate_loss():
    model = tr.IafMap.initialize(3, 2, (8,), np.random.default_rng(0))
    net = MlpSurrogate((3, 4, 2))
    Z = np.random.default_rng(1).standard_normal((16, 3))
    loss, grad = tr.rkl_loss_and_grad_surrogate(model, net, np.zeros(2), Z)
    assert loss == pytest.approx(np.mean(0.5 * np.sum(Z**2, axis=1)), rel=1e-14)
    d = np.random.default_rng(2).standard_normal(model.n_params)
    fd = fd_directional(lambda p: tr.rkl_loss_and_grad_surrogate(
        tr.IafMap(3, 2, (8,), model.perms, p), net, np.zeros(2), Z)[0], model.params, d)
    assert grad @ d == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_surrogate_rkl_gradient_matches_finite_differences():
    model = random_iaf(4, seed=5, layers=3, scale=0.2)
    net = MlpSurrogate.initialize((4, 8, 3), np.random.default_rng(6))
    y = np.random.default_rng(7).standard_normal(3)
    Z = np.random.default_rng(8).standard_normal((6, 4))
    _, g = tr.rkl_loss_and_grad_surrogate(model, net, y, Z)

    def f(p):
        return tr.rkl_loss_and_grad_surrogate(tr.IafMap(4, 3, (8, 8), model.perms, p), net, y, Z)[0]
    rng = np.random.default_rng(9)
    for _ in range(10):
        d = rng.standard_normal(model.n_params)
        assert g @ d == pytest.approx(fd_directional(f, model.params, d), rel=1e-4)


def test_surrogate_rkl_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        tr.rkl_loss_and_grad_surrogate(random_iaf(4), MlpSurrogate((3, 2)), np.zeros(2), np.zeros((2, 4)))


def test_model_objective_exact_data_has_zero_misfit(prior8, pde8):
    H = np.mean([fwd.full_jacobian(pde8, m).T @ fwd.full_jacobian(pde8, m)
                 for m in prior8.sample(np.random.default_rng(0), 4)], axis=0) / pde8.noise_variance
    basis = solve_gevp(prior8, H, 4)
    model = random_iaf(4, seed=1, scale=0.1)
    z = np.random.default_rng(2).standard_normal((1, 4))
    X, ld = model.forward(z)
    y = fwd.pto(pde8, basis.decode(X[0]))
    loss, _ = tr.rkl_loss_and_grad_model(model, pde8, basis, y, z)
    assert loss == pytest.approx(0.5 * X[0] @ X[0] - ld[0], rel=1e-12)


def test_model_objective_gradient_matches_finite_differences(prior8, pde8):
    basis = solve_gevp(prior8, np.eye(prior8.dim), 3)
    model = random_iaf(3, seed=3, layers=2, scale=0.1)
    rng = np.random.default_rng(4)
    y = fwd.synthesize_observation(pde8, prior8.sample(rng, 1)[0], rng)
    Z = rng.standard_normal((3, 3))
    _, g = tr.rkl_loss_and_grad_model(model, pde8, basis, y, Z)
    d = rng.standard_normal(model.n_params)
    fd = fd_directional(lambda p: tr.rkl_loss_and_grad_model(
        tr.IafMap(3, 2, (8, 8), model.perms, p), pde8, basis, y, Z)[0], model.params, d)
    assert g @ d == pytest.approx(fd, rel=1e-5)


def test_model_and_surrogate_objectives_agree_in_linear_mode(linear_setup):
    prior, cfg, basis, y, exact = linear_setup
    model = random_iaf(8, seed=4, scale=0.1)
    Z = np.random.default_rng(5).standard_normal((16, 8))
    ls, gs = tr.rkl_loss_and_grad_surrogate(model, exact, y / cfg.sigma, Z)
    lm, gm = tr.rkl_loss_and_grad_model(model, cfg, basis, y, Z)
    assert lm == pytest.approx(ls, rel=1e-8)
    assert np.linalg.norm(gm - gs) <= 1e-8 * np.linalg.norm(gs)


def test_latent_and_full_objectives_coincide(linear_setup):
    prior, cfg, basis, y, _ = linear_setup
    model = random_iaf(8, seed=6, scale=0.1)
    z = np.random.default_rng(7).standard_normal(8)
    m = basis.decode(z)  # zero complement component
    x, ld = model.forward(basis.encode(m))
    mT = basis.decode(x) + (m - basis.project(m))
    full = fwd.potential(cfg, y, mT) + 0.5 * cm_inner(prior, mT, mT) - ld
    latent, _ = tr.rkl_loss_and_grad_model(model, cfg, basis, y, z[None])
    assert latent == pytest.approx(full, rel=1e-10)


def test_zero_iteration_schedule_leaves_model_unchanged():
    model = random_iaf(3)
    out, trace = tr.train_lazy_map(model, lambda m, Z: (0.0, np.zeros(m.n_params)),
                                   tr.StageSchedule([(0, 8, 1e-3)]), np.random.default_rng(0))
    assert np.array_equal(out.params, model.params) and trace.rows() == []


def test_schedules():
    assert tr.StageSchedule().stages == [(2000, 128, 5e-3), (1000, 512, 5e-3), (500, 2048, 5e-4)]
    assert tr.PAPER_SCHEDULE.stages[0] == (5000, 200, 5e-3)
    assert tr.PAPER_SCHEDULE.stages[-1] == (1000, 7500, 5e-4)
    with pytest.raises(ValueError):
        tr.StageSchedule([(10, 0, 1e-3)])


def test_divergence_restores_best_parameters():
    model = tr.IafMap.initialize(2, 1, (4,), np.random.default_rng(0))
    calls = {"n": 0}

    def objective(m, Z):
        calls["n"] += 1
        if calls["n"] > 5:
            return float("nan"), np.full(m.n_params, np.nan)
        return float(calls["n"]), np.ones(m.n_params)

    out, trace = tr.train_lazy_map(model, objective, tr.StageSchedule([(50, 4, 1e-2)]), np.random.default_rng(1))
    assert trace.diverged and len(trace.loss) == 7
    assert np.array_equal(out.params, model.params)  # first iterate had the lowest loss


def test_training_is_deterministic(linear_setup):
    prior, cfg, basis, y, exact = linear_setup
    obj = tr.surrogate_objective(exact, y / cfg.sigma)
    runs = [tr.train_lazy_map(tr.IafMap.initialize(8, 2, (16,), np.random.default_rng(0)), obj,
                              tr.StageSchedule([(20, 16, 5e-3), (5, 32, 1e-3)]), np.random.default_rng(3))
            for _ in range(2)]
    assert runs[0][0].params.tobytes() == runs[1][0].params.tobytes()
    assert runs[0][1].rows() == runs[1][1].rows()
    assert [r[1] for r in runs[0][1].rows()] == [0] * 20 + [1] * 5


def test_identity_start_loss_matches_prior_expectation(linear_setup):
    prior, cfg, basis, y, exact = linear_setup
    model = tr.IafMap.initialize(8, 2, (16,), np.random.default_rng(0))
    Z = np.random.default_rng(1).standard_normal((4000, 8))
    per = 0.5 * np.sum((exact(Z) - y / cfg.sigma) ** 2, axis=1) + 0.5 * np.sum(Z**2, axis=1)
    loss, _ = tr.rkl_loss_and_grad_surrogate(model, exact, y / cfg.sigma, Z)
    # analytic value: E||A z - b||^2 / 2 + d_r / 2 with A = exact weights
    A = exact.layers[0][0]
    analytic = 0.5 * (np.sum(A * A) + np.sum((y / cfg.sigma) ** 2)) + 4.0
    assert loss == pytest.approx(per.mean(), rel=1e-12)
    assert abs(loss - analytic) < 3 * per.std() / np.sqrt(len(Z))


def test_push_samples(linear_setup):
    prior, cfg, basis, _, _ = linear_setup
    model = tr.IafMap.initialize(8, 2, (16,), np.random.default_rng(0))
    C = prior.covariance()
    ms = tr.push_samples(model, basis, prior, 20_000, np.random.default_rng(1))
    assert np.linalg.norm(np.cov(ms, rowvar=False) - C) < 0.10 * np.linalg.norm(C)
    ms0, Z, X, ld = tr.push_samples(model, basis, prior, 50, np.random.default_rng(2), "zero", return_latent=True)
    assert np.allclose(ms0, Z @ basis.decoder.T)
    again = tr.push_samples(model, basis, prior, 50, np.random.default_rng(2), "zero")
    assert again.tobytes() == ms0.tobytes()


def test_affine_log_ratio_closed_form():
    a, b = 1.7, -0.4
    model = tr.AffineMap([b], [[a]])
    z = np.array([[0.3], [-1.1]])
    x = a * z[:, 0] + b
    log_pi = -0.5 * x**2
    log_push = -0.5 * ((x - b) / a) ** 2 - np.log(a)
    assert np.allclose(tr.pushforward_log_ratio(model, z), log_pi - log_push)


def test_log_ratio_requires_origins():
    with pytest.raises(NotImplementedError):
        tr.pushforward_log_ratio(random_iaf(2), m=np.zeros(3))


def test_log_ratio_self_normalizes():
    model = random_iaf(4, seed=11, scale=0.15)
    Z = np.random.default_rng(12).standard_normal((50_000, 4))
    r = np.exp(tr.pushforward_log_ratio(model, Z))
    assert abs(r.mean() - 1) < 3 * r.std() / np.sqrt(len(r))


def test_pushforward_mode_of_identity_is_origin():
    model = tr.IafMap.initialize(3, 2, (8,), np.random.default_rng(0))
    x, z, ok = tr.pushforward_mode(model, np.random.default_rng(1))
    assert ok and np.allclose(x, 0, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_scales_are_positive_and_logdet_finite(seed, dim):
    model = random_iaf(dim, seed=seed % 1000, layers=2, scale=3.0)
    Z = np.random.default_rng(seed).standard_normal((8, dim)) * 10
    X, ld = model.forward(Z)
    assert np.all(np.isfinite(X)) and np.all(np.isfinite(ld))
    assert np.all(np.abs(ld) <= tr.LOG_SCALE_CLAMP * dim * 2 + 1e-12)
