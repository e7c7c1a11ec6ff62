"""Reduced-basis neural operator: an MLP ``g_w: R^{d_r} -> R^{d_y}`` on latent inputs.

Gradients are hand-written reverse passes.  The H1 objective needs the
derivative of the input Jacobian with respect to the weights, which is done
by carrying the forward-mode Jacobian through the layers and then reversing
both the value and the Jacobian recursions together.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .activations import gelu, gelu_and_grad, gelu_hess
from .subspace import EmbeddedDataset

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _layer_shapes(sizes):
    return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


class MlpSurrogate:
    """Dense network with GELU hidden layers and a linear output layer.

    All weights live in one flat vector ``params``; ``layers`` are views
    ``(W, b)`` into it with ``W`` of shape ``(fan_out, fan_in)``.
    """

    def __init__(self, sizes, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        shapes = _layer_shapes(self.sizes)
        self.n_params = sum(o * i + o for o, i in shapes)
        if params is None:
            params = np.zeros(self.n_params)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params.copy()
        self.layers = self._views(self.params)

    def _views(self, flat):
        views, k = [], 0
        for o, i in _layer_shapes(self.sizes):
            W = flat[k:k + o * i].reshape(o, i)
            k += o * i
            b = flat[k:k + o]
            k += o
            views.append((W, b))
        return views

    @classmethod
    def initialize(cls, sizes, rng: np.random.Generator) -> MlpSurrogate:
        """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        net = cls(sizes)
        for W, b in net.layers:
            bound = 1.0 / np.sqrt(W.shape[1])
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = rng.uniform(-bound, bound, b.shape)
        return net

    @classmethod
    def linear(cls, W, b=None) -> MlpSurrogate:
        W = np.asarray(W, dtype=float)
        net = cls((W.shape[1], W.shape[0]))
        net.layers[0][0][...] = W
        if b is not None:
            net.layers[0][1][...] = b
        return net

    def copy(self) -> MlpSurrogate:
        return MlpSurrogate(self.sizes, self.params)

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    def __call__(self, z):
        return forward(self, z)


def forward(s: MlpSurrogate, z: np.ndarray) -> np.ndarray:
    """Evaluate the network on one latent vector or on the rows of a batch."""
    a = np.asarray(z, dtype=float)
    last = len(s.layers) - 1
    for l, (W, b) in enumerate(s.layers):
        a = a @ W.T + b
        if l < last:
            a = gelu(a)
    return a


def _forward_pass(s: MlpSurrogate, Z: np.ndarray, with_jacobian: bool):
    """Batched pass storing what the reverse sweep needs."""
    acts = [Z]
    pres, slopes, pre_jacs, jacs = [], [], [], [None]
    a, J = Z, None
    last = len(s.layers) - 1
    for l, (W, b) in enumerate(s.layers):
        p = a @ W.T + b
        pres.append(p)
        if with_jacobian:
            M = np.broadcast_to(W, (len(Z),) + W.shape) if J is None else np.einsum("hk,nkr->nhr", W, J)
            pre_jacs.append(M)
        if l < last:
            a, d = gelu_and_grad(p)
            slopes.append(d)
            if with_jacobian:
                J = d[:, :, None] * M
        else:
            a = p
            if with_jacobian:
                J = M
        acts.append(a)
        jacs.append(J)
    return acts, pres, slopes, pre_jacs, jacs


def input_jacobian(s: MlpSurrogate, z: np.ndarray) -> np.ndarray:
    """``d g_w / d z`` by forward accumulation; ``(d_y, d_r)`` or ``(N, d_y, d_r)`` for a batch."""
    z = np.asarray(z, dtype=float)
    Z = z[None] if z.ndim == 1 else z
    jacs = _forward_pass(s, Z, True)[4]
    J = np.array(jacs[-1])
    return J[0] if z.ndim == 1 else J


def misfit_and_input_grad(s: MlpSurrogate, X: np.ndarray, target: np.ndarray):
    """Per-row ``0.5 ||g_w(x) - target||^2`` and its gradient with respect to ``x``."""
    acts, _, slopes, _, _ = _forward_pass(s, X, False)
    r = acts[-1] - target
    last = len(s.layers) - 1
    g = r
    for l in range(last, -1, -1):
        W, _ = s.layers[l]
        if l < last:
            g = g * slopes[l]
        g = g @ W
    return 0.5 * np.sum(r * r, axis=1), g


def loss_and_grad(s: MlpSurrogate, batch: EmbeddedDataset, objective: str = "L2"):
    """Empirical L2 or H1 risk on ``batch`` and its exact gradient w.r.t. ``s.params``.

    ``L2``: ``mean ||g - g_w(z)||^2``;  ``H1`` adds ``mean ||J_r - grad g_w(z)||_F^2``.
    """
    if objective not in ("L2", "H1"):
        raise ValueError(f"unknown objective {objective!r}")
    h1 = objective == "H1"
    if h1 and batch.jacobians is None:
        raise ValueError("H1 objective requires Jacobian data")
    Z, Y = batch.inputs, batch.outputs
    N = len(Z)
    acts, pres, slopes, pre_jacs, jacs = _forward_pass(s, Z, h1)
    r = acts[-1] - Y
    loss = float(np.sum(r * r)) / N
    a_bar = 2.0 * r / N
    J_bar = None
    if h1:
        RJ = jacs[-1] - batch.jacobians
        loss += float(np.sum(RJ * RJ)) / N
        J_bar = 2.0 * RJ / N
    grad = np.zeros(s.n_params)
    grads = s._views(grad)
    last = len(s.layers) - 1
    for l in range(last, -1, -1):
        W, _ = s.layers[l]
        gW, gb = grads[l]
        if l < last:
            p_bar = a_bar * slopes[l]
            if h1:
                M = pre_jacs[l]
                s_bar = np.einsum("nhr,nhr->nh", J_bar, M)
                p_bar = p_bar + s_bar * gelu_hess(pres[l])
                M_bar = slopes[l][:, :, None] * J_bar
        else:
            p_bar = a_bar
            M_bar = J_bar
        gW += p_bar.T @ acts[l]
        gb += p_bar.sum(axis=0)
        if h1:
            if l == 0:
                gW += M_bar.sum(axis=0)
            else:
                gW += np.einsum("nhr,nkr->hk", M_bar, jacs[l])
                J_bar = np.einsum("nhr,hk->nkr", M_bar, W)
        if l > 0:
            a_bar = p_bar @ W
    return loss, grad


@dataclass
class TrainConfig:
    objective: str = "H1"
    epochs: int = 500
    batch_size: int = 32
    # (epoch span, learning rate); the last rate persists past the listed spans
    schedule: list = field(default_factory=lambda: [(375, 1e-3), (125, 3e-4)])
    seed: int = 0
    hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        if self.objective not in ("L2", "H1"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        self.schedule = [(int(n), float(r)) for n, r in self.schedule]
        if not self.schedule or any(n < 0 or r <= 0 for n, r in self.schedule):
            raise ValueError("learning-rate schedule needs positive spans and rates")

    def rate(self, epoch: int) -> float:
        start = 0
        for span, rate in self.schedule:
            if epoch < start + span:
                return rate
            start += span
        return self.schedule[-1][1]


@dataclass
class LossReport:
    train_loss: list = field(default_factory=list)
    E_g: float = float("nan")
    E_grad_g: float = float("nan")


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(dataset: EmbeddedDataset, cfg: TrainConfig, testset: EmbeddedDataset | None = None,
          init: MlpSurrogate | None = None):
    """Minibatch Adam on the chosen objective; deterministic given ``cfg.seed``."""
    if dataset.N == 0:
        raise ValueError("empty training set")
    sizes = (dataset.inputs.shape[1], *cfg.hidden, dataset.outputs.shape[1])
    net = MlpSurrogate.initialize(sizes, np.random.default_rng([cfg.seed, 0])) if init is None else init.copy()
    opt = Adam(net.n_params)
    report = LossReport()
    N = dataset.N
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(N)
        lr = cfg.rate(epoch)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = loss_and_grad(net, dataset.subset(idx), cfg.objective)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged("training diverged")
            total += loss * len(idx)
            opt.step(net.params, grad, lr)
        report.train_loss.append(total / N)
        if epoch % 100 == 0:
            logger.debug("epoch %d loss %.4e", epoch, total / N)
    if testset is not None:
        report.E_g, report.E_grad_g = generalization_errors(net, testset)
    return net, report


def generalization_errors(s: MlpSurrogate, testset: EmbeddedDataset):
    """Relative RMS errors of the outputs and of the latent Jacobians over ``testset``.

    The Jacobian error is ``nan`` when the test set carries no Jacobians.
    """
    if testset.N == 0:
        raise ValueError("empty test set")
    pred = forward(s, testset.inputs)
    num = np.sum((pred - testset.outputs) ** 2, axis=1)
    den = np.sum(testset.outputs**2, axis=1)
    E_g = float(np.sqrt(np.mean(num / den)))
    if testset.jacobians is None:
        return E_g, float("nan")
    Jp = input_jacobian(s, testset.inputs)
    num = np.sum((testset.jacobians - Jp) ** 2, axis=(1, 2))
    den = np.sum(testset.jacobians**2, axis=(1, 2))
    return E_g, float(np.sqrt(np.mean(num / den)))
