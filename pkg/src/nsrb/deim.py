"""Discrete empirical interpolation of ``max(0, .)`` and adaptive RB-DEIM training."""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .discretization import assemble_source_matrix
from .estimators import delta_L, delta_rb_L, poincare_constant
from .numerics import RANK_TOL, numerical_rank, parallel_map
from .reduction import (
    STAGNATION_WINDOW,
    FECache,
    RBBasis,
    RedundantModeError,
    StagnationError,
    _check_stagnation,
    evaluate_reduced,
    extend_basis,
    pod1,
)

__all__ = [
    "DeimData",
    "DeimPointError",
    "AdaptiveTrace",
    "deim_points",
    "deim_pod",
    "deim_update",
    "classical_deim_offline",
    "initial_deim",
    "choose_seed",
    "deim_growth",
    "adaptive_rb_deim",
]

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-10
INVERTIBLE_TOL = 1e-12


class DeimPointError(ValueError):
    """Point selection picked an index that is already in use."""


class DeimData:
    """Interpolation data ``(Phi, I)`` defining ``Phi (P^T Phi)^{-1} P^T``.

    Parameters
    ----------
    Phi : ndarray, shape (N, L)
        Orthonormal columns (Euclidean inner product).
    indices : sequence of int
        Distinct interpolation rows ``i_1 .. i_L``.
    """

    def __init__(self, Phi, indices, check=True):
        self.Phi = np.asarray(Phi, dtype=float)
        self.indices = np.asarray(indices, dtype=np.intp).reshape(-1)
        if self.Phi.ndim != 2 or self.Phi.shape[1] != self.indices.size:
            raise ValueError(
                f"Phi has shape {self.Phi.shape} but {self.indices.size} indices were given"
            )
        self.Phi.setflags(write=False)
        self.indices.setflags(write=False)
        self._lu = None
        if self.size:
            PtPhi = self.Phi[self.indices]
            if check:
                self._validate(PtPhi)
            self._lu = la.lu_factor(PtPhi)

    def _validate(self, PtPhi):
        L = self.size
        if np.unique(self.indices).size != L:
            raise ValueError("DEIM indices are not distinct")
        if np.any(self.indices < 0) or np.any(self.indices >= self.N):
            raise ValueError("DEIM index out of range")
        dev = np.max(np.abs(self.Phi.T @ self.Phi - np.eye(L)))
        if dev > ORTHO_TOL:
            raise ValueError(f"DEIM basis not orthonormal (deviation {dev:.2e})")
        smin = la.svdvals(PtPhi)[-1]
        if not smin > INVERTIBLE_TOL:
            raise ValueError(f"P^T Phi is singular (smallest singular value {smin:.2e})")

    @classmethod
    def empty(cls, N):
        return cls(np.zeros((N, 0)), np.zeros(0, dtype=np.intp))

    @classmethod
    def identity(cls, N):
        return cls(np.eye(N), np.arange(N))

    @property
    def N(self):
        return self.Phi.shape[0]

    @property
    def size(self):
        return self.Phi.shape[1]

    def __len__(self):
        return self.size

    def apply(self, g):
        """Interpolant ``Phi (P^T Phi)^{-1} g[I]`` (column-wise for matrices)."""
        g = np.asarray(g, dtype=float)
        if self.size == 0:
            return np.zeros_like(g)
        return self.Phi @ la.lu_solve(self._lu, g[self.indices])

    def interpolation_weights(self, X):
        """``X^T Phi (P^T Phi)^{-1}``, e.g. ``W`` for ``X = Mlump Psi``."""
        if self.size == 0:
            return np.zeros((X.shape[1], 0))
        return la.lu_solve(self._lu, self.Phi.T @ X, trans=1).T


def deim_points(modes, existing=None):
    """Greedy interpolation-point selection for new modes.

    Each new mode is interpolated by the current data; the index of the
    largest residual entry (first one on ties) is appended.
    """
    modes = np.asarray(modes, dtype=float)
    if modes.ndim == 1:
        modes = modes[:, None]
    N = modes.shape[0]
    Phi = existing.Phi if existing is not None else np.zeros((N, 0))
    idx = list(existing.indices) if existing is not None else []
    for j in range(modes.shape[1]):
        phi = modes[:, j]
        if idx:
            gamma = la.solve(Phi[idx], phi[idx])
            r = phi - Phi @ gamma
        else:
            r = phi
        i = int(np.argmax(np.abs(r)))
        if i in idx:
            raise DeimPointError(f"DEIM point {i} selected twice; modes are numerically dependent")
        Phi = np.column_stack([Phi, phi])
        idx.append(i)
    return DeimData(Phi, idx)


def _fix_signs(U):
    pivots = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])]
    return U * np.where(pivots < 0, -1.0, 1.0)


def deim_pod(E, L, rank_tol=RANK_TOL, reference=None):
    """Leading left singular vectors of ``E`` (at most ``L``, at most the numerical rank)."""
    if E.size == 0 or L < 1:
        return np.zeros((E.shape[0], 0))
    U, s, _ = la.svd(E, full_matrices=False, check_finite=False)
    Lt = min(int(L), numerical_rank(s, rank_tol, reference))
    return _fix_signs(U[:, :Lt])


def deim_update(deim, y, L_grow, rank_tol=RANK_TOL):
    """Enlarge DEIM data from one FE trajectory.

    The snapshot matrix ``E = max(0, y^1 .. y^K)`` is deflated by the current
    basis (twice), and up to ``L_grow`` leading modes of the remainder are
    added.  The rank threshold is relative to the largest singular value of
    ``E`` before deflation, so a fully captured trajectory adds nothing.

    Returns
    -------
    deim : DeimData
    grew : bool
        False when no mode was added.
    """
    if int(L_grow) < 1:
        raise ValueError(f"L_grow must be at least 1, got {L_grow}")
    E = np.maximum(np.asarray(y, dtype=float)[:, 1:], 0.0)
    if not np.any(E):
        return deim, False
    ref = la.norm(E, 2)
    for _ in range(2):
        if deim.size:
            E = E - deim.Phi @ (deim.Phi.T @ E)
    new = deim_pod(E, L_grow, rank_tol, reference=ref)
    if new.shape[1] == 0:
        return deim, False
    return deim_points(new, deim if deim.size else None), True


def classical_deim_offline(problem, ops, train_set, L, fe_cache=None, settings=None, rank_tol=RANK_TOL):
    """DEIM data from ``max(0, y)`` snapshots over a training set.

    Snapshots of each parameter are compressed by a thin SVD before the
    global POD, which keeps memory at the level of one trajectory.
    """
    if int(L) < 1:
        raise ValueError(f"L must be at least 1, got {L}")
    fe_cache = fe_cache or FECache(problem, ops, settings)
    blocks = []
    for mu in np.atleast_2d(train_set):
        E = np.maximum(fe_cache(mu)[:, 1:], 0.0)
        if not np.any(E):
            continue
        U, s, _ = la.svd(E, full_matrices=False, check_finite=False)
        r = numerical_rank(s, rank_tol * 1e-2)
        blocks.append(U[:, :r] * s[:r])
    if not blocks:
        raise ValueError("all DEIM snapshots are zero (rank < 1)")
    modes = deim_pod(np.column_stack(blocks), L, rank_tol)
    if modes.shape[1] == 0:
        raise ValueError("all DEIM snapshots are zero (rank < 1)")
    return deim_points(modes)


def initial_deim(problem, ops, mu_seed, fe_cache=None, settings=None, size=2):
    """DEIM data of size at most ``size`` from the FE trajectory at ``mu_seed``."""
    fe_cache = fe_cache or FECache(problem, ops, settings)
    deim, grew = deim_update(DeimData.empty(ops.N), fe_cache(mu_seed), size)
    if not grew:
        raise ValueError(
            f"zero snapshots at mu={np.atleast_1d(mu_seed).tolist()}: cannot build initial DEIM data"
        )
    return deim


def choose_seed(problem, ops, train_set):
    """Training parameter closest to the box midpoint with a nonzero source."""
    train = np.atleast_2d(train_set)
    dist = np.linalg.norm(train - problem.box.midpoint, axis=1)
    for i in np.argsort(dist, kind="stable"):
        if np.any(assemble_source_matrix(problem, train[i], ops)):
            return train[i].copy()
    raise ValueError("every training parameter has a zero source")


def deim_growth(eps2, tol_L):
    """Number of DEIM modes to add: ``max(1, floor(log10(eps2 / tol_L)))``."""
    if not eps2 > 0:
        return 1
    return max(1, int(math.floor(math.log10(eps2 / tol_L))))


@dataclass
class AdaptiveTrace:
    records: list = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)

    @property
    def totals(self):
        return np.array([r["eps1"] + r["eps2"] for r in self.records])

    def rows(self):
        out = []
        for r in self.records:
            row = {"iteration": r["iteration"]}
            for i, v in enumerate(np.atleast_1d(r["mu"])):
                row[f"mu{i + 1}"] = float(v)
            row["delta_max"] = r["eps1"] + r["eps2"]
            for k, v in r.items():
                if k not in ("iteration", "mu"):
                    row[k] = v
            out.append(row)
        return out


def adaptive_rb_deim(
    problem,
    ops,
    train_set,
    tol,
    tol_rb,
    tol_L,
    initial=None,
    settings=None,
    fe_cache=None,
    c_P=None,
    n_jobs=1,
    max_iter=None,
):
    """Interleaved growth of the RB and DEIM bases.

    Each iteration picks the training parameter maximizing
    ``Delta_rb,L + Delta_L``.  If the RB part exceeds ``tol_rb`` one POD
    mode of the projection error is added; the DEIM data grows by
    :func:`deim_growth` modes from the same FE trajectory, and by more if
    it has fallen behind the RB size.

    Returns
    -------
    basis : RBBasis
    deim : DeimData
    trace : AdaptiveTrace
    """
    if tol < tol_rb + tol_L:
        raise ValueError(f"need tol >= tol_rb + tol_L, got {tol} < {tol_rb} + {tol_L}")
    train = np.atleast_2d(np.asarray(train_set, dtype=float))
    if train.shape[0] == 0:
        raise ValueError("empty training set")
    fe_cache = fe_cache or FECache(problem, ops, settings)
    basis = RBBasis(ops)
    trace = AdaptiveTrace()
    if initial is None:
        try:
            seed = choose_seed(problem, ops, train)
        except ValueError:
            # no nonlinearity to interpolate anywhere on the training set
            seed = None
        if seed is None:
            initial = DeimData.empty(ops.N)
        else:
            initial = initial_deim(problem, ops, seed, fe_cache, settings)
    deim = initial
    if np.isinf(tol):
        return basis, deim, trace
    c_P = poincare_constant(ops) if c_P is None else c_P

    def indicators(mu):
        _, y, _ = evaluate_reduced(basis, problem, mu, settings, deim)
        F = fe_cache.source(mu) if mu in fe_cache else None
        return (
            delta_rb_L(mu, y, deim, ops, problem, F),
            delta_L(mu, y, deim, ops, problem, c_P),
        )

    history = []
    start = time.perf_counter()
    while True:
        vals = np.array(parallel_map(indicators, list(train), n_jobs))
        total = vals.sum(axis=1)
        i = int(np.argmax(total))
        eps1, eps2 = float(vals[i, 0]), float(vals[i, 1])
        trace.add(
            iteration=len(trace.records), mu=train[i].copy(), eps1=eps1, eps2=eps2,
            basis_size=basis.size, deim_size=deim.size, seconds=time.perf_counter() - start,
        )
        logger.info(
            "adaptive iteration %d: l=%d, L=%d, eps1=%.3e, eps2=%.3e at mu=%s",
            len(history), basis.size, deim.size, eps1, eps2, train[i],
        )
        history.append(eps1 + eps2)
        if eps1 + eps2 <= tol:
            break
        if max_iter is not None and len(history) > max_iter:
            break
        if _check_stagnation(history):
            raise StagnationError(
                f"adaptive training stagnated over {STAGNATION_WINDOW} iterations at {eps1 + eps2:.3e}",
                trace,
            )
        y = fe_cache(train[i])
        changed = False
        if eps1 > tol_rb:
            E = y[:, 1:] - basis.project(y[:, 1:])
            try:
                basis = extend_basis(basis, pod1(E, ops))
                changed = True
            except (RedundantModeError, ValueError) as exc:
                logger.info("no RB mode added at mu=%s: %s", train[i], exc)
        deim, grew = deim_update(deim, y, deim_growth(eps2, tol_L))
        if deim.size < basis.size:
            deim, extra = deim_update(deim, y, basis.size - deim.size)
            grew = grew or extra
        if not (changed or grew):
            raise StagnationError(
                f"adaptive training stalled at mu={train[i].tolist()}: neither basis can grow",
                trace,
            )
    return basis, deim, trace
