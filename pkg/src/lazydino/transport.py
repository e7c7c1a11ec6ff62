"""Latent transport maps and lazy-map variational inference.

The latent map is a stack of affine inverse autoregressive layers.  Layer
``i`` reorders its input by a fixed permutation ``p``, applies
``v_j = mu_j(u_<j) + exp(clip(s_j(u_<j))) u_j`` with a MADE conditioner, and
writes ``v`` back in the original coordinate order (``x[p] = v``), so a
layer whose conditioner output is zero is exactly the identity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import forward as fwd
from .activations import gelu_and_grad
from .surrogate import MlpSurrogate, misfit_and_input_grad

logger = logging.getLogger(__name__)

LOG_SCALE_CLAMP = 7.0


class TransportDiverged(RuntimeError):
    pass


def made_masks(dim: int, hidden) -> list:
    """Connectivity masks for a MADE conditioner with outputs ``(mu, s)``.

    Input ``i`` has degree ``i + 1``; output ``j`` may only see hidden units of
    degree ``< j + 1``, so ``(mu_j, s_j)`` depends on inputs ``< j`` only.
    """
    deg_in = np.arange(1, dim + 1)
    span = max(dim - 1, 1)
    degs = [deg_in] + [np.arange(h) % span + 1 for h in hidden]
    masks = [(degs[l + 1][:, None] >= degs[l][None, :]).astype(float) for l in range(len(hidden))]
    out = (deg_in[:, None] > degs[-1][None, :]).astype(float)
    masks.append(np.vstack([out, out]))
    return masks


class IafMap:
    """Composition of affine IAF layers on ``R^dim``; all weights in one flat ``params``."""

    def __init__(self, dim: int, n_layers: int = 8, hidden=(64, 64), perms=None, params=None):
        self.dim = int(dim)
        self.n_layers = int(n_layers)
        self.hidden = tuple(int(h) for h in hidden)
        self.masks = made_masks(self.dim, self.hidden)
        sizes = (self.dim, *self.hidden, 2 * self.dim)
        self._shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        self.params_per_layer = sum(o * i + o for o, i in self._shapes)
        self.n_params = self.params_per_layer * self.n_layers
        if perms is None:
            perms = np.tile(np.arange(self.dim), (self.n_layers, 1))
        self.perms = np.asarray(perms, dtype=int).reshape(self.n_layers, self.dim)
        self.params = np.zeros(self.n_params) if params is None else np.array(params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters")

    @classmethod
    def initialize(cls, dim, n_layers, hidden, rng: np.random.Generator) -> IafMap:
        """Random permutations and fan-in uniform weights with a zero output layer (identity map)."""
        perms = np.array([rng.permutation(dim) for _ in range(n_layers)]).reshape(n_layers, dim)
        model = cls(dim, n_layers, hidden, perms)
        for layer in model.layer_weights(model.params):
            for l, (W, b) in enumerate(layer[:-1]):
                bound = 1.0 / np.sqrt(W.shape[1])
                W[...] = rng.uniform(-bound, bound, W.shape) * model.masks[l]
                b[...] = rng.uniform(-bound, bound, b.shape)
        return model

    def copy(self) -> IafMap:
        return IafMap(self.dim, self.n_layers, self.hidden, self.perms, self.params)

    def layer_weights(self, flat):
        """Per layer, a list of ``(W, b)`` views into ``flat``."""
        out, k = [], 0
        for _ in range(self.n_layers):
            layer = []
            for o, i in self._shapes:
                W = flat[k:k + o * i].reshape(o, i)
                k += o * i
                layer.append((W, flat[k:k + o]))
                k += o
            out.append(layer)
        return out

    def conditioner(self, layer: int, U: np.ndarray):
        """Shift and raw log-scale of layer ``layer`` for permuted inputs ``U``."""
        weights = self.layer_weights(self.params)[layer]
        a = U
        for l, (W, b) in enumerate(weights[:-1]):
            a = gelu_and_grad(a @ (W * self.masks[l]).T + b)[0]
        W, b = weights[-1]
        out = a @ (W * self.masks[-1]).T + b
        return out[:, :self.dim], out[:, self.dim:]

    def forward(self, Z: np.ndarray, keep: bool = False):
        """Map rows of ``Z``; returns ``(X, logdet)`` and, with ``keep``, the reverse-pass cache."""
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        X = np.atleast_2d(Z)
        logdet = np.zeros(len(X))
        cache = []
        for layer, weights in enumerate(self.layer_weights(self.params)):
            perm = self.perms[layer]
            U = X[:, perm]
            acts, slopes = [U], []
            a = U
            for l, (W, b) in enumerate(weights[:-1]):
                a, d = gelu_and_grad(a @ (W * self.masks[l]).T + b)
                acts.append(a)
                slopes.append(d)
            W, b = weights[-1]
            out = a @ (W * self.masks[-1]).T + b
            mu, s_raw = out[:, :self.dim], out[:, self.dim:]
            s = np.clip(s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
            scale = np.exp(s)
            V = mu + scale * U
            X = np.empty_like(V)
            X[:, perm] = V
            logdet += s.sum(axis=1)
            if keep:
                cache.append((acts, slopes, s_raw, scale))
        if single:
            X, logdet = X[0], logdet[0]
        return (X, logdet, cache) if keep else (X, logdet)

    def backward(self, cache, X_bar: np.ndarray, logdet_bar: np.ndarray):
        """Reverse pass: gradient w.r.t. ``params`` and ``Z`` given output cotangents."""
        grad = np.zeros(self.n_params)
        gweights = self.layer_weights(grad)
        weights_all = self.layer_weights(self.params)
        X_bar = np.asarray(X_bar, dtype=float)
        ld_bar = np.asarray(logdet_bar, dtype=float)[:, None]
        for layer in range(self.n_layers - 1, -1, -1):
            perm = self.perms[layer]
            acts, slopes, s_raw, scale = cache[layer]
            U = acts[0]
            weights, gw = weights_all[layer], gweights[layer]
            V_bar = X_bar[:, perm]
            s_bar = (V_bar * scale * U + ld_bar) * (np.abs(s_raw) < LOG_SCALE_CLAMP)
            out_bar = np.hstack([V_bar, s_bar])
            U_bar = V_bar * scale
            a_bar = out_bar
            for l in range(len(weights) - 1, -1, -1):
                W, _ = weights[l]
                Wm = W * self.masks[l]
                if l < len(weights) - 1:
                    a_bar = a_bar * slopes[l]
                gw[l][0][...] += (a_bar.T @ acts[l]) * self.masks[l]
                gw[l][1][...] += a_bar.sum(axis=0)
                a_bar = a_bar @ Wm
            U_bar = U_bar + a_bar
            X_bar = np.empty_like(U_bar)
            X_bar[:, perm] = U_bar
        return grad, X_bar


class AffineMap:
    """``x = shift + L z`` with lower-triangular ``L`` of positive diagonal."""

    def __init__(self, shift, L):
        self.shift = np.asarray(shift, dtype=float)
        self.L = np.asarray(L, dtype=float)
        if np.any(np.diag(self.L) <= 0) or not np.allclose(self.L, np.tril(self.L)):
            raise ValueError("L must be lower triangular with positive diagonal")
        self.dim = len(self.shift)
        self.n_params = 0
        self.params = np.zeros(0)

    @classmethod
    def identity(cls, dim: int) -> AffineMap:
        return cls(np.zeros(dim), np.eye(dim))

    def forward(self, Z, keep: bool = False):
        Z = np.asarray(Z, dtype=float)
        X = Z @ self.L.T + self.shift
        ld = np.full(Z.shape[:-1], np.log(np.diag(self.L)).sum())
        if Z.ndim == 1:
            ld = float(ld)
        return (X, ld, None) if keep else (X, ld)

    def backward(self, cache, X_bar, logdet_bar):
        return np.zeros(0), np.asarray(X_bar) @ self.L


def surrogate_objective(surrogate: MlpSurrogate, whitened_obs: np.ndarray):
    """Batch-mean surrogate rKL objective ``0.5||g_w(T(z)) - V^* y||^2 + 0.5||T(z)||^2 - logdet``."""
    target = np.asarray(whitened_obs, dtype=float)

    def objective(model, Z):
        return rkl_loss_and_grad_surrogate(model, surrogate, target, Z)
    return objective


def rkl_loss_and_grad_surrogate(model, surrogate: MlpSurrogate, whitened_obs: np.ndarray, Z: np.ndarray):
    if surrogate.d_in != model.dim:
        raise ValueError(f"surrogate input {surrogate.d_in} != map dimension {model.dim}")
    B = len(Z)
    X, ld, cache = model.forward(Z, keep=True)
    misfit, x_grad = misfit_and_input_grad(surrogate, X, whitened_obs)
    per = misfit + 0.5 * np.sum(X * X, axis=1) - ld
    loss = float(per.mean())
    if not np.isfinite(loss):
        raise TransportDiverged("transport step diverged")
    grad, _ = model.backward(cache, (x_grad + X) / B, np.full(B, -1.0 / B))
    return loss, grad


def model_objective(cfg: fwd.PdeConfig, basis, y: np.ndarray):
    """rKL objective driven by the true PtO map with zero complement fill."""
    y = np.asarray(y, dtype=float)

    def objective(model, Z):
        return rkl_loss_and_grad_model(model, cfg, basis, y, Z)
    return objective


def rkl_loss_and_grad_model(model, cfg: fwd.PdeConfig, basis, y: np.ndarray, Z: np.ndarray):
    """Same objective with ``Phi(D T(z))``; failed solves are dropped and the batch renormalized."""
    X, ld, cache = model.forward(Z, keep=True)
    ms = basis.decode(X)
    phi = np.zeros(len(Z))
    x_grad = np.zeros_like(X)
    ok = np.ones(len(Z), dtype=bool)
    for k, m in enumerate(ms):
        try:
            phi[k], g = fwd.potential_gradient(cfg, y, m)
        except fwd.PdeError as exc:
            logger.warning("dropping batch element %d: %s", k, exc)
            ok[k] = False
            continue
        x_grad[k] = basis.decoder.T @ g
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise TransportDiverged("every forward solve in the batch failed")
    per = phi + 0.5 * np.sum(X * X, axis=1) - ld
    loss = float(per[ok].mean())
    if not np.isfinite(loss):
        raise TransportDiverged("transport step diverged")
    w = ok / n_ok
    grad, _ = model.backward(cache, (x_grad + X) * w[:, None], -w)
    return loss, grad


@dataclass
class StageSchedule:
    """Stages of ``(iterations, batch size, learning rate)``."""

    stages: list = field(default_factory=lambda: [(2000, 128, 5e-3), (1000, 512, 5e-3), (500, 2048, 5e-4)])

    def __post_init__(self):
        self.stages = [(int(i), int(b), float(a)) for i, b, a in self.stages]
        if any(i < 0 or b < 1 or a <= 0 for i, b, a in self.stages):
            raise ValueError("stage entries must be positive")

    @property
    def total_iterations(self) -> int:
        return sum(i for i, _, _ in self.stages)


PAPER_SCHEDULE = StageSchedule([(5000, 200, 5e-3), (1000, 500, 5e-3), (1000, 2000, 5e-3),
                                (1000, 5000, 5e-3), (1000, 7500, 5e-4)])


class Adamax:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.u = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.u = np.maximum(self.beta2 * self.u, np.abs(grad))
        params -= (lr / (1 - self.beta1**self.t)) * self.m / (self.u + self.eps)


@dataclass
class TransportTrace:
    iteration: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    diverged: bool = False

    def rows(self):
        return list(zip(self.iteration, self.stage, self.loss))


def train_lazy_map(model, objective, schedule: StageSchedule, rng: np.random.Generator):
    """Staged Adamax on ``objective(model, Z) -> (loss, grad)`` with fresh ``N(0, I)`` batches.

    Optimizer moments are reset at each stage boundary.  Two consecutive
    non-finite losses abort training and restore the parameters with the
    lowest recorded loss.
    """
    model = model.copy()
    trace = TransportTrace()
    best_loss, best_params = np.inf, model.params.copy()
    bad = 0
    it = 0
    for stage, (iters, batch, lr) in enumerate(schedule.stages):
        opt = Adamax(model.n_params)
        for _ in range(iters):
            Z = rng.standard_normal((batch, model.dim))
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grad = objective(model, Z)
                finite = np.isfinite(loss) and np.all(np.isfinite(grad))
            except (TransportDiverged, FloatingPointError):
                loss, finite = float("nan"), False
            trace.iteration.append(it)
            trace.stage.append(stage)
            trace.loss.append(float(loss))
            it += 1
            if not finite:
                bad += 1
                if bad >= 2:
                    logger.warning("transport training diverged at iteration %d; restoring best parameters", it)
                    model.params[...] = best_params
                    trace.diverged = True
                    return model, trace
                continue
            bad = 0
            if loss < best_loss:
                best_loss, best_params = loss, model.params.copy()
            opt.step(model.params, grad, lr)
    return model, trace


def push_samples(model, basis, prior, n: int, rng: np.random.Generator, fill: str = "prior_complement",
                 return_latent: bool = False):
    """Pushforward samples ``lift(T(z))`` with ``z ~ N(0, I)``."""
    from .subspace import lift

    Z = rng.standard_normal((n, model.dim))
    X, ld = model.forward(Z)
    ms = lift(basis, prior, X, rng, fill)
    if return_latent:
        return ms, Z, X, ld
    return ms


def pushforward_log_ratio(model, z: np.ndarray | None = None, m: np.ndarray | None = None):
    """``log d mu / d(T_# mu)`` at the pushforward sample originating from ``z``.

    Uses ``log(T_# pi)(T(z)) = log pi(z) - logdet(z)``, so no inversion is needed.
    Evaluation at an arbitrary field ``m`` would need ``T^{-1}`` and is not supported.
    """
    if m is not None or z is None:
        raise NotImplementedError("evaluation at an arbitrary field requires inverting the map")
    z = np.asarray(z, dtype=float)
    X, ld = model.forward(z)
    return 0.5 * np.sum(z * z, axis=-1) - 0.5 * np.sum(X * X, axis=-1) + ld


def pushforward_mode(model, rng: np.random.Generator, n_starts: int = 64, max_iter: int = 500):
    """Latent point maximizing the pushforward density: minimize ``0.5||z||^2 + logdet(z)``.

    Returns ``(x_star, z_star, converged)`` with ``x_star = T(z_star)``.
    """
    def f(z):
        _, ld, cache = model.forward(z[None], keep=True)
        _, g = model.backward(cache, np.zeros((1, model.dim)), np.ones(1))
        return 0.5 * z @ z + ld[0], z + g[0]

    starts = rng.standard_normal((n_starts, model.dim))
    _, lds = model.forward(starts)
    z0 = starts[np.argmin(0.5 * np.sum(starts**2, axis=1) + lds)]
    res = optimize.minimize(f, z0, jac=True, method="L-BFGS-B", options=dict(maxiter=max_iter, gtol=1e-10))
    x_star, _ = model.forward(res.x)
    return x_star, res.x, bool(res.success)
