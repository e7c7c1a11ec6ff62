"""Parameter-to-observable map of the reaction-diffusion example.

Solves ``-div(exp(m) grad u) + u^3 = 0`` on the unit square with ``u = 1`` on
top, ``u = 0`` on the bottom and zero flux on the sides, observes ``u`` at
interior nodes, and differentiates the map through the discrete residual.
A ``linear_test`` mode replaces the PDE by ``G(m) = B m``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .prior import Mesh, triangles

logger = logging.getLogger(__name__)

NEWTON_MAX_ITERS = 50
NEWTON_RTOL = 1e-10
NEWTON_ATOL = 1e-12


class PdeError(RuntimeError):
    """Raised when a forward solve or linearization fails."""


def default_obs_points(mesh: Mesh, per_axis: int = 5) -> np.ndarray:
    """Nearest nodes to a uniform ``per_axis`` x ``per_axis`` interior lattice."""
    t = np.arange(1, per_axis + 1) / (per_axis + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    return mesh.nearest_node(np.column_stack([X.ravel(), Y.ravel()]))


@dataclass(eq=False)
class PdeConfig:
    mesh: Mesh
    obs_points: np.ndarray
    noise_variance: float
    mode: str = "nonlinear"
    B: np.ndarray | None = None
    reaction: float = 1.0
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.obs_points = np.asarray(self.obs_points, dtype=int)
        if self.noise_variance <= 0:
            raise ValueError("noise variance must be positive")
        if self.mode not in ("nonlinear", "linear_test"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "linear_test":
            if self.B is None:
                raise ValueError("linear_test mode needs a matrix B")
            self.B = np.asarray(self.B, dtype=float)
            if self.B.shape[1] != self.mesh.node_count:
                raise ValueError("B has the wrong number of columns")
        else:
            if len(np.unique(self.obs_points)) != len(self.obs_points):
                raise ValueError("observation points must be distinct")
            edge = np.concatenate([self.mesh.boundary(s) for s in ("bottom", "top", "left", "right")])
            if np.isin(self.obs_points, edge).any():
                raise ValueError("observation points must be interior nodes")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.noise_variance))

    @property
    def d_y(self) -> int:
        return self.B.shape[0] if self.mode == "linear_test" else len(self.obs_points)

    @property
    def dim(self) -> int:
        return self.mesh.node_count

    def _geometry(self):
        if "geom" not in self._cache:
            mesh = self.mesh
            tris = triangles(mesh)
            cell = mesh.hx * mesh.hy
            grads = tris.grads
            local = np.einsum("tia,tja->tij", grads, grads) * (tris.area / cell)[:, None, None]
            n = mesh.node_count
            weights = np.bincount(tris.vertices.ravel(), np.repeat(tris.area / 3.0, 3), minlength=n) / cell
            bottom, top = mesh.boundary("bottom"), mesh.boundary("top")
            fixed = np.zeros(n, dtype=bool)
            fixed[bottom] = fixed[top] = True
            free = np.flatnonzero(~fixed)
            lift = np.zeros(n)
            lift[top] = 1.0
            rows = np.repeat(tris.vertices, 3, axis=1).ravel()
            cols = np.tile(tris.vertices, (1, 3)).ravel()
            free_pos = np.full(n, -1)
            free_pos[free] = np.arange(len(free))
            self._cache["geom"] = dict(
                tris=tris, local=local, weights=weights, free=free, lift=lift,
                scatter=rows * n + cols, free_pos=free_pos,
                obs_free=free_pos[self.obs_points],
            )
        return self._cache["geom"]


@dataclass(eq=False)
class PdeState:
    u: np.ndarray
    converged: bool
    newton_iters: int
    m: np.ndarray | None = field(default=None, repr=False)
    lu: tuple | None = field(default=None, repr=False)


def _coefficient(cfg: PdeConfig, m: np.ndarray) -> np.ndarray:
    g = cfg._geometry()
    return np.exp(m)[g["tris"].vertices].mean(axis=1)


def _stiffness(cfg: PdeConfig, m: np.ndarray) -> np.ndarray:
    g = cfg._geometry()
    n = cfg.dim
    vals = g["local"] * _coefficient(cfg, m)[:, None, None]
    return np.bincount(g["scatter"], weights=vals.ravel(), minlength=n * n).reshape(n, n)


def residual(cfg: PdeConfig, u: np.ndarray, m: np.ndarray, S: np.ndarray | None = None) -> np.ndarray:
    """Residual on the free (non-Dirichlet) nodes."""
    g = cfg._geometry()
    S = _stiffness(cfg, m) if S is None else S
    R = S @ u + cfg.reaction * g["weights"] * u**3
    return R[g["free"]]


def state_jacobian(cfg: PdeConfig, u: np.ndarray, m: np.ndarray, S: np.ndarray | None = None) -> np.ndarray:
    """``dR/du`` restricted to free rows and columns."""
    g = cfg._geometry()
    S = _stiffness(cfg, m) if S is None else S
    free = g["free"]
    A = S[np.ix_(free, free)]
    A[np.diag_indices_from(A)] += 3.0 * cfg.reaction * (g["weights"] * u**2)[free]
    return A


def parameter_jacobian(cfg: PdeConfig, u: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``dR/dm``: free rows, all parameter columns."""
    g = cfg._geometry()
    n = cfg.dim
    tv = g["tris"].vertices
    r_local = np.einsum("tij,tj->ti", g["local"], u[tv])
    em = np.exp(m)[tv] / 3.0
    vals = r_local[:, :, None] * em[:, None, :]
    Rm = np.bincount(g["scatter"], weights=vals.ravel(), minlength=n * n).reshape(n, n)
    return Rm[g["free"]]


def solve_pde(cfg: PdeConfig, m: np.ndarray) -> PdeState:
    """Newton solve with the exact state Jacobian.

    Raises
    ------
    PdeError
        "newton diverged" if the residual criterion is not met within 50 iterations.
    """
    if cfg.mode != "nonlinear":
        raise PdeError("solve_pde requires mode='nonlinear'")
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise PdeError("parameter field is not finite")
    g = cfg._geometry()
    free = g["free"]
    S = _stiffness(cfg, m)
    u = cfg.mesh.coordinates()[:, 1].copy()
    R = residual(cfg, u, m, S)
    tol = NEWTON_RTOL * np.linalg.norm(R) + NEWTON_ATOL
    norm = np.linalg.norm(R)
    for it in range(1, NEWTON_MAX_ITERS + 1):
        lu = linalg.lu_factor(state_jacobian(cfg, u, m, S))
        du = linalg.lu_solve(lu, R)
        step = 1.0
        while True:
            trial = u.copy()
            trial[free] -= step * du
            R_trial = residual(cfg, trial, m, S)
            new_norm = np.linalg.norm(R_trial)
            if new_norm < norm or step < 1e-4 or new_norm <= tol:
                break
            step *= 0.5
        u, R, norm = trial, R_trial, new_norm
        if not np.isfinite(norm):
            break
        if norm <= tol:
            lu = linalg.lu_factor(state_jacobian(cfg, u, m, S))
            return PdeState(u, True, it, m, lu)
    raise PdeError("newton diverged")


def _linearization(cfg: PdeConfig, m: np.ndarray, state: PdeState | None):
    if state is None or state.m is None or state.m is not m and not np.array_equal(state.m, m):
        state = solve_pde(cfg, m)
    if not state.converged:
        raise PdeError("linearization singular")
    lu = state.lu
    if lu is None:
        lu = linalg.lu_factor(state_jacobian(cfg, state.u, m))
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        raise PdeError("linearization singular")
    return state, lu, parameter_jacobian(cfg, state.u, m)


def pto(cfg: PdeConfig, m: np.ndarray, state: PdeState | None = None) -> np.ndarray:
    """Noise-free observable ``G(m)``."""
    m = np.asarray(m, dtype=float)
    if cfg.mode == "linear_test":
        return cfg.B @ m
    state = solve_pde(cfg, m) if state is None else state
    return state.u[cfg.obs_points].copy()


def synthesize_observation(cfg: PdeConfig, m: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return pto(cfg, m) + cfg.sigma * rng.standard_normal(cfg.d_y)


def jacobian_action(cfg: PdeConfig, m: np.ndarray, V: np.ndarray, state: PdeState | None = None) -> np.ndarray:
    """Direct sensitivities: ``J V`` for a matrix ``V`` of parameter directions (columns)."""
    V = np.asarray(V, dtype=float)
    if cfg.mode == "linear_test":
        return cfg.B @ V
    state, lu, Rm = _linearization(cfg, m, state)
    du = linalg.lu_solve(lu, Rm @ V)
    return -du[cfg._geometry()["obs_free"]]


def jacobian_adjoint_action(cfg: PdeConfig, m: np.ndarray, W: np.ndarray, state: PdeState | None = None) -> np.ndarray:
    """Adjoint sensitivities: ``J^T W`` for a matrix ``W`` of data-space directions (columns)."""
    W = np.asarray(W, dtype=float)
    if cfg.mode == "linear_test":
        return cfg.B.T @ W
    state, lu, Rm = _linearization(cfg, m, state)
    g = cfg._geometry()
    rhs = np.zeros((len(g["free"]),) + W.shape[1:])
    rhs[g["obs_free"]] = W
    lam = linalg.lu_solve(lu, rhs, trans=1)
    return -(Rm.T @ lam)


def full_jacobian(cfg: PdeConfig, m: np.ndarray, state: PdeState | None = None) -> np.ndarray:
    """Dense ``d_y x node_count`` Jacobian, built from ``d_y`` adjoint solves."""
    if cfg.mode == "linear_test":
        return cfg.B.copy()
    return jacobian_adjoint_action(cfg, m, np.eye(cfg.d_y), state).T


def latent_jacobian(cfg: PdeConfig, m: np.ndarray, state: PdeState | None, decoder: np.ndarray,
                    method: str = "auto") -> np.ndarray:
    """Whitened latent Jacobian ``sigma^{-1} J(m) D``.

    ``method='auto'`` takes whichever of the direct (``d_r`` solves) and adjoint
    (``d_y`` solves) paths needs fewer linear solves.
    """
    d_r = decoder.shape[1]
    if method == "auto":
        method = "direct" if d_r <= cfg.d_y else "adjoint"
    if method == "direct":
        J = jacobian_action(cfg, m, decoder, state)
    elif method == "adjoint":
        J = jacobian_adjoint_action(cfg, m, np.eye(cfg.d_y), state).T @ decoder
    else:
        raise ValueError(f"unknown method {method!r}")
    return J / cfg.sigma


def potential(cfg: PdeConfig, y: np.ndarray, m: np.ndarray, state: PdeState | None = None) -> float:
    """Data misfit ``0.5 * sigma^{-2} * ||G(m) - y||^2``."""
    r = pto(cfg, m, state) - y
    return 0.5 * float(r @ r) / cfg.noise_variance


def potential_gradient(cfg: PdeConfig, y: np.ndarray, m: np.ndarray, state: PdeState | None = None):
    """Euclidean gradient of the potential via one adjoint solve; returns ``(phi, grad)``."""
    if cfg.mode != "linear_test" and state is None:
        state = solve_pde(cfg, m)
    r = (pto(cfg, m, state) - y) / cfg.noise_variance
    grad = jacobian_adjoint_action(cfg, m, r[:, None], state)[:, 0]
    return 0.5 * cfg.noise_variance * float(r @ r), grad


def evaluate(cfg: PdeConfig, ms: np.ndarray, decoder: np.ndarray | None = None):
    """PtO values (and latent Jacobians if ``decoder`` is given) for a batch of fields.

    Samples whose Newton solve fails are skipped; the returned ``keep`` mask marks
    the surviving rows.  Results stay in sample order.
    """
    outputs, jacs, keep = [], [], np.zeros(len(ms), dtype=bool)
    for k, m in enumerate(ms):
        try:
            state = None if cfg.mode == "linear_test" else solve_pde(cfg, m)
            g = pto(cfg, m, state)
            J = None if decoder is None else latent_jacobian(cfg, m, state, decoder)
        except PdeError as exc:
            logger.warning("dropping sample %d: %s", k, exc)
            continue
        keep[k] = True
        outputs.append(g)
        if J is not None:
            jacs.append(J)
    G = np.array(outputs).reshape(len(outputs), cfg.d_y)
    Js = None if decoder is None else np.array(jacs).reshape(len(jacs), cfg.d_y, decoder.shape[1])
    return G, Js, keep


def generate_samples(cfg: PdeConfig, prior, rng: np.random.Generator, n: int,
                     decoder: np.ndarray | None = None, max_drop_rate: float = 0.01):
    """Draw ``n`` prior samples with successful solves, resampling failed ones.

    Returns ``(ms, G, J_r)``.  Aborts with ``PdeError`` if more than
    ``max_drop_rate`` of the attempted solves fail.
    """
    ms_all, G_all, J_all = [], [], []
    attempted = dropped = 0
    while sum(len(g) for g in G_all) < n:
        need = n - sum(len(g) for g in G_all)
        ms = prior.sample(rng, need)
        G, J, keep = evaluate(cfg, ms, decoder)
        attempted += need
        dropped += int((~keep).sum())
        if dropped > max(1, max_drop_rate * max(n, attempted)):
            raise PdeError(f"too many failed solves ({dropped} of {attempted})")
        ms_all.append(ms[keep])
        G_all.append(G)
        if J is not None:
            J_all.append(J)
    ms = np.concatenate(ms_all)
    G = np.concatenate(G_all)
    J = np.concatenate(J_all) if decoder is not None else None
    return ms, G, J
