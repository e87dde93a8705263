"""P1 finite elements on the unit square and the Crank-Nicolson time grid.

Trajectories are stored as coefficient matrices: an array of shape
``(N, K + 1)`` holds nodal values ``y^0 .. y^K`` of a function that is
piecewise linear in time, an array of shape ``(N, K)`` holds slab values of
a function that is piecewise constant in time.  The helpers below integrate
both kinds exactly in time.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .numerics import spd_factorize

__all__ = [
    "SpatialMesh",
    "TimeGrid",
    "FEOperators",
    "build_mesh",
    "make_time_grid",
    "assemble_operators",
    "build_operators",
    "assemble_load",
    "source_factors",
    "temporal_source_factor",
    "assemble_source_matrix",
    "time_average",
    "trajectory_norms",
    "piecewise_constant_norm",
    "space_time_inner",
    "averaging_defect_norm",
    "temporal_matrices",
]

# 7-point degree-5 rule on the reference triangle (barycentric points, weights sum to 1)
_S15 = np.sqrt(15.0)
_A1, _B1 = (9.0 - 2.0 * _S15) / 21.0, (6.0 + _S15) / 21.0
_A2, _B2 = (9.0 + 2.0 * _S15) / 21.0, (6.0 - _S15) / 21.0
_QUAD_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_QUAD_W = np.array(
    [9 / 40]
    + [(155.0 + _S15) / 1200.0] * 3
    + [(155.0 - _S15) / 1200.0] * 3
)


@dataclass(frozen=True)
class SpatialMesh:
    """Uniform right-angled triangulation of the unit square.

    Every grid square is split along the diagonal from its lower-left to its
    upper-right corner.  Nodes are numbered lexicographically with ``x1``
    running fastest; only interior nodes carry degrees of freedom.
    """

    n: int
    points: np.ndarray      # (n+1)^2 x 2, all grid nodes
    triangles: np.ndarray   # 2 n^2 x 3, indices into points
    interior: np.ndarray    # global indices of the (n-1)^2 interior nodes

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def n_dofs(self):
        return self.interior.size

    @property
    def interior_points(self):
        return self.points[self.interior]


def build_mesh(n):
    """Mesh with ``n`` subdivisions per direction (``h = 1/n``)."""
    n = int(n)
    if n < 2:
        raise ValueError(f"need at least 2 subdivisions, got {n}")
    coords = np.linspace(0.0, 1.0, n + 1)
    x1, x2 = np.meshgrid(coords, coords)  # x1 fastest in ravel order
    points = np.column_stack([x1.ravel(), x2.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    p00 = (j * (n + 1) + i).ravel()
    p10, p01, p11 = p00 + 1, p00 + n + 1, p00 + n + 2
    triangles = np.concatenate(
        [np.column_stack([p00, p10, p11]), np.column_stack([p00, p11, p01])]
    )
    ii, jj = np.meshgrid(np.arange(1, n), np.arange(1, n))
    interior = (jj * (n + 1) + ii).ravel()
    return SpatialMesh(n=n, points=points, triangles=triangles, interior=interior)


@dataclass(frozen=True)
class TimeGrid:
    """Time instances ``0 = t_0 < ... < t_K = T``."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("need at least two time instances")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0.0):
            raise ValueError("time instances must start at 0 and increase strictly")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_instants(cls, instants):
        return cls(np.asarray(instants, dtype=float))

    @property
    def K(self):
        return self.t.size - 1

    @property
    def T(self):
        return float(self.t[-1])

    @property
    def dt(self):
        return np.diff(self.t)

    @property
    def max_step(self):
        return float(self.dt.max())


def make_time_grid(T, K):
    """Equidistant grid ``t_k = k T / K``."""
    K = int(K)
    if K < 1 or not T > 0:
        raise ValueError(f"need K >= 1 and T > 0, got K={K}, T={T}")
    return TimeGrid(np.arange(K + 1) * (float(T) / K))


def _element_geometry(mesh):
    xy = mesh.points[mesh.triangles]  # nt x 3 x 2
    x, y = xy[..., 0], xy[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    area = 0.5 * np.abs(det)
    bx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]]) / det[:, None]
    by = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]]) / det[:, None]
    return xy, area, bx, by


def _assemble_full(mesh):
    _, area, bx, by = _element_geometry(mesh)
    if np.any(area <= 0.0):
        raise ValueError("degenerate triangle in mesh")
    K_loc = area[:, None, None] * (bx[:, :, None] * bx[:, None, :] + by[:, :, None] * by[:, None, :])
    M_loc = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n_all = mesh.points.shape[0]
    V = sp.csr_matrix((K_loc.ravel(), (rows, cols)), shape=(n_all, n_all))
    M = sp.csr_matrix((M_loc.ravel(), (rows, cols)), shape=(n_all, n_all))
    support = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area, 3), minlength=n_all)
    return M, V, support


class FEOperators:
    """Spatial FE matrices on interior nodes together with the time grid.

    Attributes
    ----------
    M, V : scipy.sparse.csr_matrix
        Consistent mass and stiffness matrices.
    lumped : ndarray
        Diagonal of the lumped mass matrix, ``|supp(zeta_j)| / 3``.
    """

    def __init__(self, mesh, grid, M, V, lumped):
        self.mesh = mesh
        self.grid = grid
        self.M = M
        self.V = V
        self.lumped = lumped
        self._load_cache = {}

    @property
    def N(self):
        return self.M.shape[0]

    @property
    def K(self):
        return self.grid.K

    @property
    def dt(self):
        return self.grid.dt

    @cached_property
    def V_factor(self):
        return spd_factorize(self.V)

    @cached_property
    def M_factor(self):
        return spd_factorize(self.M)

    def with_grid(self, grid):
        """Same spatial operators on another time grid."""
        ops = FEOperators(self.mesh, grid, self.M, self.V, self.lumped)
        for name in ("V_factor", "M_factor"):
            if name in self.__dict__:
                ops.__dict__[name] = self.__dict__[name]
        ops._load_cache = self._load_cache
        return ops


def assemble_operators(mesh, grid=None):
    """Assemble mass, stiffness and lumped mass on interior nodes."""
    M, V, support = _assemble_full(mesh)
    idx = mesh.interior
    M_in = M[idx][:, idx].tocsr()
    V_in = V[idx][:, idx].tocsr()
    M_in.sort_indices()
    V_in.sort_indices()
    return FEOperators(mesh, grid, M_in, V_in, support[idx] / 3.0)


def build_operators(n, T, K):
    """Mesh, time grid and operators in one call."""
    return assemble_operators(build_mesh(n), make_time_grid(T, K))


def assemble_load(mesh, g):
    """Load vector ``(int g zeta_i)_i`` on interior nodes.

    ``g(x1, x2)`` must accept arrays.  Uses a degree-5 triangle rule.
    """
    xy, area, _, _ = _element_geometry(mesh)
    qp = np.einsum("qk,tkd->tqd", _QUAD_BARY, xy)  # nt x nq x 2
    vals = np.asarray(g(qp[..., 0], qp[..., 1]), dtype=float)
    vals = np.broadcast_to(vals, qp.shape[:2])
    local = area[:, None] * np.einsum("tq,q,qk->tk", vals, _QUAD_W, _QUAD_BARY)
    full = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.points.shape[0])
    return full[mesh.interior]


def source_factors(problem, ops):
    """Spatial load matrix ``B_F`` (N x p_F) of a separable source, cached on ``ops``."""
    src = problem.separable
    if src is None:
        raise ValueError(f"problem {problem.name!r} has no separable source")
    key = (id(src), ops.mesh.n)
    if key not in ops._load_cache:
        ops._load_cache[key] = (src, np.column_stack([assemble_load(ops.mesh, g) for g in src.spatial]))
    return ops._load_cache[key][1]


def temporal_source_factor(problem, grid):
    src = problem.separable
    return np.array([float(src.gamma(t)) for t in grid.t])


def assemble_source_matrix(problem, mu, ops, direct=False):
    """Load vectors ``F^0 .. F^K`` as an ``N x (K+1)`` matrix.

    The separable factors are used unless ``direct`` is set or the problem
    has none; the direct path assembles ``f(t_k; mu)`` at every instance.
    """
    mu = problem.check_parameter(mu)
    if problem.separable is not None and not direct:
        B = source_factors(problem, ops)
        beta = np.asarray(problem.separable.beta(mu), dtype=float)
        return np.outer(B @ beta, temporal_source_factor(problem, ops.grid))
    cols = [
        assemble_load(ops.mesh, lambda x1, x2, t=t: problem.source(t, x1, x2, mu))
        for t in ops.grid.t
    ]
    return np.column_stack(cols)


def time_average(y):
    """Slab averages ``(y^{k-1} + y^k) / 2`` of a piecewise-linear trajectory."""
    y = np.asarray(y)
    return 0.5 * (y[:, :-1] + y[:, 1:])


def _colwise(A, X, Y):
    """Column-wise bilinear forms ``x_k^T A y_k``; ``A`` may be a diagonal given as 1-D array."""
    if isinstance(A, np.ndarray) and A.ndim == 1:
        return np.einsum("ik,i,ik->k", X, A, Y)
    return np.einsum("ik,ik->k", X, A @ Y)


def space_time_inner(phi, psi, A, dt):
    """Exact time integral of ``<phi(t), psi(t)>_A``.

    Each argument is piecewise linear (``K+1`` columns) or piecewise
    constant (``K`` columns) in time.
    """
    dt = np.asarray(dt, dtype=float)
    K = dt.size
    kinds = []
    for arr in (phi, psi):
        if arr.shape[1] == K + 1:
            kinds.append("pl")
        elif arr.shape[1] == K:
            kinds.append("pc")
        else:
            raise ValueError(f"trajectory with {arr.shape[1]} columns does not fit {K} slabs")
    if kinds == ["pc", "pc"]:
        return float(np.dot(dt, _colwise(A, phi, psi)))
    if kinds == ["pl", "pc"]:
        return float(np.dot(dt, _colwise(A, time_average(phi), psi)))
    if kinds == ["pc", "pl"]:
        return float(np.dot(dt, _colwise(A, phi, time_average(psi))))
    a0, a1, b0, b1 = phi[:, :-1], phi[:, 1:], psi[:, :-1], psi[:, 1:]
    slab = (
        2.0 * _colwise(A, a0, b0) + _colwise(A, a0, b1) + _colwise(A, a1, b0) + 2.0 * _colwise(A, a1, b1)
    )
    return float(np.dot(dt, slab) / 6.0)


def _pl_norm_sq(y, A, dt):
    a, b = y[:, :-1], y[:, 1:]
    return float(np.dot(dt, _colwise(A, a, a) + _colwise(A, a, b) + _colwise(A, b, b)) / 3.0)


def piecewise_constant_norm(values, A, dt):
    """``(sum_k dt_k v_k^T A v_k)^(1/2)`` for slab values ``v_k``."""
    dt = np.asarray(dt, dtype=float)
    return float(np.sqrt(max(np.dot(dt, _colwise(A, values, values)), 0.0)))


def averaging_defect_norm(y, A, dt):
    """``||y - P y||`` in ``L2(0,T; A)`` for the slab-averaging projection ``P``.

    On each slab ``y - Py`` is linear with zero mean, so its squared norm is
    ``dt_k / 12 * |y^k - y^{k-1}|_A^2``.
    """
    d = np.diff(y, axis=1)
    return float(np.sqrt(max(np.dot(dt, _colwise(A, d, d)) / 12.0, 0.0)))


@dataclass(frozen=True)
class TrajectoryNorms:
    H: float
    Y: float
    dot_H: float
    final_H: float
    final_V: float


def trajectory_norms(y, ops):
    """Norms of a piecewise-linear trajectory, integrated exactly in time."""
    dt = ops.dt
    d = np.diff(y, axis=1)
    dot_sq = np.dot(1.0 / dt, _colwise(ops.M, d, d))
    yT = y[:, -1]
    return TrajectoryNorms(
        H=np.sqrt(max(_pl_norm_sq(y, ops.M, dt), 0.0)),
        Y=np.sqrt(max(_pl_norm_sq(y, ops.V, dt), 0.0)),
        dot_H=float(np.sqrt(max(dot_sq, 0.0))),
        final_H=float(np.sqrt(max(yT @ (ops.M @ yT), 0.0))),
        final_V=float(np.sqrt(max(yT @ (ops.V @ yT), 0.0))),
    )


def temporal_matrices(grid):
    """Matrices ``(<dsigma_l/dt, tau_k>)_{k,l}`` and ``(<sigma_l, tau_k>)_{k,l}``.

    ``sigma_l`` (l = 1..K) are the temporal hat functions and ``tau_k``
    (k = 1..K) the slab indicators.
    """
    dt = grid.dt
    K = dt.size
    N_time = np.eye(K) - np.eye(K, k=-1)
    M_time = np.diag(0.5 * dt)
    M_time[np.arange(1, K), np.arange(K - 1)] = 0.5 * dt[1:]
    return N_time, M_time
