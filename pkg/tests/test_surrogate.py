import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from lazydino import surrogate as sg
from lazydino.activations import gelu, gelu_grad
from lazydino.subspace import DataWhitener, EmbeddedDataset, basis_from_decoder, embed_dataset
from lazydino import forward as fwd

from conftest import fd_directional, linear_problem


def small_net(seed=0, sizes=(3, 8, 8, 2)):
    return sg.MlpSurrogate.initialize(sizes, np.random.default_rng(seed))


def random_batch(seed, n=3, d_r=3, d_y=2, jac=True):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((n, d_y, d_r)) if jac else None
    return EmbeddedDataset(rng.standard_normal((n, d_r)), rng.standard_normal((n, d_y)), J)


@pytest.fixture(scope="module")
def linear_data():
    """Linear model restricted to span(D), so a single linear layer is exact."""
    prior, cfg = linear_problem()
    rng = np.random.default_rng(0)
    D = prior.solve_K(np.linalg.qr(rng.standard_normal((prior.dim, 8)))[0])
    basis = basis_from_decoder(prior, D)
    wh = DataWhitener(cfg.sigma, cfg.d_y)
    J_r = cfg.B @ D / cfg.sigma

    def make(seed, n):
        ms = basis.project(prior.sample(np.random.default_rng(seed), n))
        return embed_dataset(basis, wh, ms, ms @ cfg.B.T, np.repeat(J_r[None], n, axis=0))
    return cfg, basis, make(1, 256), make(2, 128)


def test_gelu_matches_erf_definition():
    x = np.linspace(-6, 6, 101)
    assert gelu(0.0) == 0.0
    assert np.allclose(gelu(x), 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)
    assert np.allclose(gelu_grad(x), fd_directional(gelu, x, np.ones_like(x), 1e-6), atol=1e-8)


def test_forward_examples():
    net = sg.MlpSurrogate((3, 4, 2))
    net.layers[-1][1][...] = [1.5, -2.0]
    assert np.array_equal(net(np.ones(3)), [1.5, -2.0])
    W = np.random.default_rng(0).standard_normal((2, 3))
    z = np.random.default_rng(1).standard_normal(3)
    assert np.allclose(sg.MlpSurrogate.linear(W)(z), W @ z)
    big = small_net()
    Z = np.random.default_rng(2).standard_normal((5, 3))
    batched = big(Z)
    for k in range(5):
        assert np.allclose(batched[k], big(Z[k]), rtol=0, atol=1e-14)


def test_input_jacobian_examples():
    W = np.random.default_rng(0).standard_normal((2, 3))
    lin = sg.MlpSurrogate.linear(W)
    assert np.array_equal(sg.input_jacobian(lin, np.random.default_rng(1).standard_normal(3)), W)
    net = small_net(3)
    z = np.random.default_rng(4).standard_normal(3)
    J = sg.input_jacobian(net, z)
    for j in range(3):
        e = np.eye(3)[j]
        fd = fd_directional(net, z, e, 1e-6)
        assert np.linalg.norm(J[:, j] - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)
    tiny = sg.MlpSurrogate(net.sizes, net.params * 1e-6)
    d = 1e-3 * np.random.default_rng(5).standard_normal(3)
    assert np.abs(sg.input_jacobian(tiny, z) - sg.input_jacobian(tiny, z + d)).max() < 1e-8


def test_perfect_fit_has_zero_loss_and_gradient():
    net = small_net(1)
    Z = np.random.default_rng(0).standard_normal((4, 3))
    batch = EmbeddedDataset(Z, net(Z), sg.input_jacobian(net, Z))
    for obj in ("L2", "H1"):
        loss, g = sg.loss_and_grad(net, batch, obj)
        assert loss == 0.0 and np.all(g == 0)


def test_linear_l2_gradient_closed_form():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((2, 3))
    net = sg.MlpSurrogate.linear(W)
    z, g = rng.standard_normal(3), rng.standard_normal(2)
    _, grad = sg.loss_and_grad(net, EmbeddedDataset(z[None], g[None]), "L2")
    gW = grad[:6].reshape(2, 3)
    assert np.allclose(gW, 2 * np.outer(W @ z - g, z), atol=1e-14)


@pytest.mark.parametrize("objective", ["L2", "H1"])
def test_weight_gradient_matches_finite_differences(objective):
    net = small_net(7)
    batch = random_batch(8)
    _, g = sg.loss_and_grad(net, batch, objective)
    rng = np.random.default_rng(9)

    def f(p):
        return sg.loss_and_grad(sg.MlpSurrogate(net.sizes, p), batch, objective)[0]
    for _ in range(10):
        d = rng.standard_normal(net.n_params)
        fd = fd_directional(f, net.params, d, 1e-6)
        assert g @ d == pytest.approx(fd, rel=1e-5)


def test_h1_requires_jacobians():
    with pytest.raises(ValueError, match="Jacobian"):
        sg.loss_and_grad(small_net(), random_batch(0, jac=False), "H1")


def test_misfit_input_gradient():
    net = small_net(2)
    rng = np.random.default_rng(1)
    X, t = rng.standard_normal((4, 3)), rng.standard_normal(2)
    val, g = sg.misfit_and_input_grad(net, X, t)
    for k in range(4):
        d = rng.standard_normal(3)
        fd = fd_directional(lambda x: 0.5 * np.sum((net(x) - t) ** 2), X[k], d)
        assert g[k] @ d == pytest.approx(fd, rel=1e-6)


def test_train_config_schedule():
    cfg = sg.TrainConfig()
    assert (cfg.epochs, cfg.batch_size) == (500, 32)
    assert cfg.rate(0) == 1e-3 and cfg.rate(374) == 1e-3 and cfg.rate(375) == 3e-4 and cfg.rate(499) == 3e-4
    with pytest.raises(ValueError):
        sg.TrainConfig(objective="H2")
    with pytest.raises(ValueError):
        sg.TrainConfig(schedule=[(10, 0.0)])


def test_linear_surrogate_learns_exact_map(linear_data):
    cfg, basis, train, test = linear_data
    tc = sg.TrainConfig(objective="L2", epochs=300, hidden=(), schedule=[(200, 3e-2), (100, 3e-3)])
    net, rep = sg.train(train, tc, test)
    assert rep.E_g <= 1e-3
    exact = sg.MlpSurrogate.linear(cfg.B @ basis.decoder / cfg.sigma)
    E_g, E_grad = sg.generalization_errors(exact, test)
    assert E_g < 1e-6 and E_grad < 1e-6


def test_training_reduces_loss_and_is_deterministic(linear_data):
    _, _, train, _ = linear_data
    tc = sg.TrainConfig(objective="H1", epochs=30, hidden=(16, 16), seed=4)
    a, ra = sg.train(train, tc)
    b, rb = sg.train(train, tc)
    assert ra.train_loss[-1] < ra.train_loss[0]
    assert a.params.tobytes() == b.params.tobytes()


def test_zero_surrogate_has_unit_error(linear_data):
    _, _, _, test = linear_data
    zero = sg.MlpSurrogate((8, 4, 8))
    assert sg.generalization_errors(zero, test)[0] == 1.0
    with pytest.raises(ValueError):
        sg.generalization_errors(zero, test.subset(np.arange(0)))


def test_non_finite_loss_aborts():
    batch = random_batch(0, n=8)
    cfg = sg.TrainConfig(objective="L2", epochs=50, hidden=(4,), schedule=[(50, 1e300)])
    with pytest.raises(sg.TrainingDiverged, match="training diverged"), np.errstate(all="ignore"):
        sg.train(batch, cfg)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_h1_loss_dominates_l2(seed):
    net = small_net(seed % 1000)
    batch = random_batch(seed)
    assert sg.loss_and_grad(net, batch, "H1")[0] >= sg.loss_and_grad(net, batch, "L2")[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_input_jacobian_is_derivative_of_forward(seed):
    net = small_net(seed % 997)
    rng = np.random.default_rng(seed)
    z, d = rng.standard_normal((2, 3))
    fd = fd_directional(net, z, d, 1e-6)
    assert np.linalg.norm(sg.input_jacobian(net, z) @ d - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-2)
