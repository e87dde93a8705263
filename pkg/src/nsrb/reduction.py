"""V-orthonormal reduced bases and the POD-greedy training loop."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .discretization import assemble_source_matrix
from .estimators import delta_L, delta_rb, delta_rb_L, true_errors
from .numerics import parallel_map, sym_eig_desc
from .solvers import ReducedSystem, fe_solve, rb_deim_solve, rb_solve

__all__ = [
    "RBBasis",
    "RedundantModeError",
    "StagnationError",
    "GreedyTrace",
    "FECache",
    "pod1",
    "project_V",
    "extend_basis",
    "greedy_rb",
    "evaluate_reduced",
]

logger = logging.getLogger(__name__)

REDUNDANT_TOL = 1e-12
STAGNATION_WINDOW = 5


class RedundantModeError(ValueError):
    """The new mode lies (numerically) in the span of the basis."""


class StagnationError(RuntimeError):
    """A training loop stopped making progress.

    ``trace`` holds the training history up to the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class RBBasis:
    """V-orthonormal reduced basis ``Psi`` (``N x l``) on fixed FE operators."""

    def __init__(self, ops, Psi=None):
        self.ops = ops
        self.Psi = np.zeros((ops.N, 0)) if Psi is None else np.asarray(Psi, dtype=float)
        if self.Psi.ndim != 2 or self.Psi.shape[0] != ops.N:
            raise ValueError(f"basis must have {ops.N} rows, got shape {self.Psi.shape}")
        self._systems = {}

    @property
    def size(self):
        return self.Psi.shape[1]

    def __len__(self):
        return self.size

    def coefficients(self, v):
        """``Psi^T V v`` (works column-wise on matrices)."""
        return self.Psi.T @ (self.ops.V @ v)

    def project(self, v):
        return self.Psi @ self.coefficients(v)

    def lift(self, y_r):
        return self.Psi @ y_r

    def extend(self, psi):
        return extend_basis(self, psi)

    def gram(self):
        return self.Psi.T @ (self.ops.V @ self.Psi)

    def system(self, deim=None):
        """Projected operators, cached per DEIM data object."""
        key = id(deim)
        hit = self._systems.get(key)
        if hit is None or hit[0] is not deim:
            hit = (deim, ReducedSystem(self.Psi, self.ops, deim))
            self._systems[key] = hit
        return hit[1]

    def with_ops(self, ops):
        """Same coefficient matrix on operators with another time grid."""
        return RBBasis(ops, self.Psi)


def _V_matrix(ops_or_V):
    return getattr(ops_or_V, "V", ops_or_V)


def pod1(snapshots, ops):
    """Dominant POD mode of the snapshot columns in the V inner product.

    Uses the method of snapshots: with ``G = S^T V S`` and its leading
    eigenpair ``(lam, u)``, the mode is ``S u / sqrt(lam)``.  The sign is
    fixed so that the entry of largest magnitude is positive.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    V = _V_matrix(ops)
    G = S.T @ (V @ S)
    lam, U = sym_eig_desc(G)
    if S.size == 0 or not lam[0] > 0.0:
        raise ValueError("all snapshots are zero; no POD mode to extract")
    psi = S @ U[:, 0] / np.sqrt(lam[0])
    psi /= np.sqrt(psi @ (V @ psi))
    if psi[np.argmax(np.abs(psi))] < 0:
        psi = -psi
    return psi


def project_V(basis, v):
    """V-orthogonal projection onto the span of the basis."""
    return basis.project(v)


def extend_basis(basis, psi_new):
    """Append the V-orthonormalized component of ``psi_new``.

    Gram-Schmidt is applied twice for stability.

    Raises
    ------
    RedundantModeError
        If the remaining V-norm after normalization is below ``1e-12``.
    """
    V = basis.ops.V
    v = np.asarray(psi_new, dtype=float).copy()
    norm = np.sqrt(max(v @ (V @ v), 0.0))
    if norm == 0.0:
        raise RedundantModeError("redundant mode: zero vector")
    v /= norm
    for _ in range(2):
        v -= basis.project(v)
    rest = np.sqrt(max(v @ (V @ v), 0.0))
    if rest < REDUNDANT_TOL:
        raise RedundantModeError(f"redundant mode: residual V-norm {rest:.3e} after projection")
    return RBBasis(basis.ops, np.column_stack([basis.Psi, v / rest]))


class FECache:
    """FE trajectories per parameter, solved on first use."""

    def __init__(self, problem, ops, settings=None):
        self.problem, self.ops, self.settings = problem, ops, settings
        self._store = {}
        self.seconds = {}

    @staticmethod
    def key(mu):
        return tuple(float(v) for v in np.atleast_1d(mu))

    def source(self, mu):
        return self.get_entry(mu)[1]

    def __call__(self, mu):
        return self.get_entry(mu)[0]

    def get_entry(self, mu):
        key = self.key(mu)
        if key not in self._store:
            F = assemble_source_matrix(self.problem, mu, self.ops)
            y, stats = fe_solve(self.ops, self.problem, mu, self.settings, F=F)
            self._store[key] = (y, F)
            self.seconds[key] = stats.seconds
        return self._store[key]

    def __contains__(self, mu):
        return self.key(mu) in self._store

    def __len__(self):
        return len(self._store)


def evaluate_reduced(basis, problem, mu, settings=None, deim=None):
    """Reduced solve (RB or RB-DEIM) returning coefficients, lifted trajectory and time."""
    system = basis.system(deim)
    solver = rb_solve if deim is None else rb_deim_solve
    y_r, stats = solver(system, problem, mu, settings)
    return y_r, basis.lift(y_r), stats.seconds


@dataclass
class GreedyTrace:
    """Per-iteration training history."""

    records: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)

    @property
    def max_values(self):
        return np.array([r["delta_max"] for r in self.records])

    def rows(self):
        out = []
        for r in self.records:
            row = {"iteration": r["iteration"]}
            for i, v in enumerate(np.atleast_1d(r["mu"])):
                row[f"mu{i + 1}"] = float(v)
            for k, v in r.items():
                if k not in ("iteration", "mu"):
                    row[k] = v
            out.append(row)
        return out


def _check_stagnation(history, window=STAGNATION_WINDOW):
    """True when the last ``window`` iterations never decreased the maximum."""
    if len(history) <= window:
        return False
    tail = history[-(window + 1):]
    return all(b >= a for a, b in zip(tail[:-1], tail[1:]))


def greedy_rb(
    problem,
    ops,
    train_set,
    tol,
    mode="estimator",
    settings=None,
    fe_cache=None,
    deim=None,
    c_P=None,
    max_size=None,
    n_jobs=1,
):
    """POD-greedy reduced-basis training.

    Parameters
    ----------
    mode : {"estimator", "true_error"}
        ``"estimator"`` maximizes the residual estimator over the training
        set, ``"true_error"`` the averaged error ``||P e||_Y`` against cached
        FE solves.
    deim : DeimData, optional
        Train with RB-DEIM reduced solves; the estimator then is
        ``Delta_rb,L + Delta_L`` and needs ``c_P``.

    Returns
    -------
    basis : RBBasis
    trace : GreedyTrace
    """
    train = np.atleast_2d(np.asarray(train_set, dtype=float))
    if train.shape[0] == 1 and train.shape[1] != problem.box.dim:
        train = train.T
    if train.shape[0] == 0:
        raise ValueError("empty training set")
    if not tol > 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    if mode not in ("estimator", "true_error"):
        raise ValueError(f"unknown greedy mode {mode!r}")
    if deim is not None and mode == "estimator" and c_P is None:
        raise ValueError("DEIM-based estimator needs the Poincare constant c_P")
    fe_cache = fe_cache or FECache(problem, ops, settings)
    basis = RBBasis(ops)
    trace = GreedyTrace()
    if np.isinf(tol):
        return basis, trace

    def indicator(mu):
        _, y, _ = evaluate_reduced(basis, problem, mu, settings, deim)
        if mode == "true_error":
            return true_errors(mu, fe_cache(mu), y, ops).PdeltaY
        F = fe_cache.source(mu) if mu in fe_cache else None
        if deim is None:
            return delta_rb(mu, y, ops, problem, F)
        return delta_rb_L(mu, y, deim, ops, problem, F) + delta_L(mu, y, deim, ops, problem, c_P)

    history = []
    start = time.perf_counter()
    while True:
        if mode == "true_error":
            for mu in train:
                fe_cache(mu)
        values = np.array(parallel_map(indicator, list(train), n_jobs))
        i = int(np.argmax(values))
        eps = float(values[i])
        trace.add(
            iteration=len(trace.records), mu=train[i].copy(), delta_max=eps,
            basis_size=basis.size, seconds=time.perf_counter() - start,
        )
        logger.info("greedy iteration %d: l=%d, max=%.3e at mu=%s", len(history), basis.size, eps, train[i])
        history.append(eps)
        if eps <= tol:
            break
        if max_size is not None and basis.size >= max_size:
            break
        if _check_stagnation(history):
            raise StagnationError(
                f"greedy stagnated: maximum {eps:.3e} not decreasing over {STAGNATION_WINDOW} iterations",
                trace,
            )
        y = fe_cache(train[i])
        E = y[:, 1:] - basis.project(y[:, 1:])
        try:
            basis = extend_basis(basis, pod1(E, ops))
        except (RedundantModeError, ValueError) as exc:
            raise StagnationError(
                f"greedy cannot extend basis at mu={train[i].tolist()}: {exc}", trace
            ) from exc
        trace.selected.append(train[i].copy())
    return basis, trace
