"""Matérn-type Gaussian prior on a regular grid of the unit square.

The covariance is ``C = K^{-2}`` with ``K = gamma * L_A + delta * I`` where
``L_A`` is the negative anisotropic Laplacian with homogeneous Neumann
boundary, discretized on node values.  ``L_A`` is assembled from linear
triangle stiffness averaged over both diagonal splits of every cell and
divided by the cell area, which is the standard 5-point stencil for
isotropic ``A`` and a symmetric 9-point stencil otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Regular ``nx`` x ``ny`` cell grid on (0, 1)^2.

    Nodes are numbered ``k = i + (nx + 1) * j`` with ``i`` along x and ``j``
    along y.
    """

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise PriorError(f"mesh needs at least 2 cells per axis, got {self.nx}x{self.ny}")
        if self.nx > 64 or self.ny > 64:
            raise PriorError("mesh is capped at 64 cells per axis (dense algebra)")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def h(self) -> float:
        """Grid spacing; geometric mean of the two spacings for non-square cells."""
        return float(np.sqrt(self.hx * self.hy))

    @property
    def node_count(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def index(self, i, j):
        return np.asarray(i) + (self.nx + 1) * np.asarray(j)

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(node_count, 2)``."""
        j, i = np.divmod(np.arange(self.node_count), self.nx + 1)
        return np.column_stack([i * self.hx, j * self.hy])

    def boundary(self, side: str) -> np.ndarray:
        """Indices of the nodes on ``side`` in {'bottom', 'top', 'left', 'right'}."""
        if side == "bottom":
            return self.index(np.arange(self.nx + 1), 0)
        if side == "top":
            return self.index(np.arange(self.nx + 1), self.ny)
        if side == "left":
            return self.index(0, np.arange(self.ny + 1))
        if side == "right":
            return self.index(self.nx, np.arange(self.ny + 1))
        raise ValueError(f"unknown side {side!r}")

    def nearest_node(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        i = np.rint(points[:, 0] / self.hx).astype(int)
        j = np.rint(points[:, 1] / self.hy).astype(int)
        return self.index(np.clip(i, 0, self.nx), np.clip(j, 0, self.ny))


@dataclass(frozen=True)
class TriangleSet:
    """Both diagonal splits of every cell; each triangle carries weight 1/2."""

    vertices: np.ndarray  # (T, 3) node indices
    grads: np.ndarray  # (T, 3, 2) gradients of the P1 hat functions
    area: np.ndarray  # (T,) area times the split weight


def triangles(mesh: Mesh) -> TriangleSet:
    hx, hy = mesh.hx, mesh.hy
    ci, cj = np.meshgrid(np.arange(mesh.nx), np.arange(mesh.ny), indexing="xy")
    ci, cj = ci.ravel(), cj.ravel()
    sw = mesh.index(ci, cj)
    se = mesh.index(ci + 1, cj)
    nw = mesh.index(ci, cj + 1)
    ne = mesh.index(ci + 1, cj + 1)
    # local corner offsets in units of (hx, hy) for each of the four triangle shapes
    shapes = [
        ((sw, se, ne), ((0, 0), (1, 0), (1, 1))),
        ((sw, ne, nw), ((0, 0), (1, 1), (0, 1))),
        ((sw, se, nw), ((0, 0), (1, 0), (0, 1))),
        ((se, ne, nw), ((1, 0), (1, 1), (0, 1))),
    ]
    verts, grads = [], []
    for nodes, offsets in shapes:
        xy = np.array(offsets, dtype=float) * np.array([hx, hy])
        # hat-function gradients from the inverse of the affine map
        edges = np.array([xy[1] - xy[0], xy[2] - xy[0]])
        inv = np.linalg.inv(edges)
        g = np.vstack([-inv.sum(axis=1), inv[:, 0], inv[:, 1]])
        verts.append(np.column_stack(nodes))
        grads.append(np.broadcast_to(g, (len(ci), 3, 2)))
    vertices = np.concatenate(verts)
    area = np.full(len(vertices), 0.5 * 0.5 * hx * hy)
    return TriangleSet(vertices, np.concatenate(grads), area)


def stiffness(mesh: Mesh, A=None, coefficient=None, tris: TriangleSet | None = None) -> np.ndarray:
    """Dense stiffness ``sum_T c_T |T| grad(phi)^T A grad(phi)`` with natural (Neumann) boundary."""
    tris = triangles(mesh) if tris is None else tris
    A = np.eye(2) if A is None else np.asarray(A, dtype=float)
    c = np.ones(len(tris.vertices)) if coefficient is None else coefficient
    local = np.einsum("tia,ab,tjb->tij", tris.grads, A, tris.grads) * (c * tris.area)[:, None, None]
    n = mesh.node_count
    rows = np.repeat(tris.vertices, 3, axis=1).ravel()
    cols = np.tile(tris.vertices, (1, 3)).ravel()
    S = np.bincount(rows * n + cols, weights=local.ravel(), minlength=n * n).reshape(n, n)
    return S


def neumann_laplacian(mesh: Mesh, A=None) -> np.ndarray:
    """Negative anisotropic Laplacian on node values, ``-div(A grad)``, Neumann boundary."""
    return stiffness(mesh, A) / (mesh.hx * mesh.hy)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Zero-mean Gaussian ``N(0, K^{-2})`` on node values.

    Immutable after construction; ``sample`` takes a caller-owned generator.
    """

    mesh: Mesh
    gamma: float
    delta: float
    A: np.ndarray
    K: np.ndarray = field(repr=False)
    chol_K: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.mesh.node_count

    def solve_K(self, b: np.ndarray) -> np.ndarray:
        """Apply ``K^{-1}`` (the covariance square root) along the first axis."""
        return linalg.cho_solve((self.chol_K, True), b)

    def apply_K(self, m: np.ndarray) -> np.ndarray:
        return self.K @ m

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return sample_prior(self, rng, n)

    def covariance(self) -> np.ndarray:
        """Dense ``K^{-2}``; meant for oracles and small meshes."""
        Kinv = self.solve_K(np.eye(self.dim))
        return Kinv @ Kinv


def build_prior(mesh: Mesh, gamma: float, delta: float, A=None) -> GaussianPrior:
    """Assemble and factorize ``K = gamma * L_A + delta * I``.

    Raises
    ------
    PriorError
        If the inputs are out of range or ``K`` is not positive definite.
    """
    A = np.eye(2) if A is None else np.asarray(A, dtype=float)
    if gamma < 0 or delta <= 0:
        raise PriorError(f"need gamma >= 0 and delta > 0, got gamma={gamma}, delta={delta}")
    if A.shape != (2, 2) or not np.allclose(A, A.T):
        raise PriorError("anisotropy A must be a symmetric 2x2 matrix")
    K = gamma * neumann_laplacian(mesh, A) + delta * np.eye(mesh.node_count)
    K = 0.5 * (K + K.T)
    try:
        chol = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError as exc:
        raise PriorError("prior operator not SPD") from exc
    K.setflags(write=False)
    chol.setflags(write=False)
    return GaussianPrior(mesh, float(gamma), float(delta), A, K, chol)


def sample_prior(prior: GaussianPrior, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` fields ``m = K^{-1} xi``; returns an array of shape ``(n, node_count)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    xi = rng.standard_normal((prior.dim, n))
    return prior.solve_K(xi).T


def apply_precision(prior: GaussianPrior, m: np.ndarray) -> np.ndarray:
    """``C^{-1} m = K (K m)``; works on a single field or on the rows of a batch."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        return prior.K @ (prior.K @ m)
    return (prior.K @ (prior.K @ m.T)).T


def cm_inner(prior: GaussianPrior, a: np.ndarray, b: np.ndarray) -> float:
    """Cameron-Martin inner product ``<a, b>_{C^{-1}} = (K a) . (K b)``."""
    return float((prior.K @ a) @ (prior.K @ b))


def anisotropy(a11: float, a12: float, a22: float) -> np.ndarray:
    return np.array([[a11, a12], [a12, a22]], dtype=float)
