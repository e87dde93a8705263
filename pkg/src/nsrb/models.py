"""Estimator-style wrappers around the offline training and online evaluation.

``fit`` trains on an array of parameters (one row per parameter),
``predict`` returns reduced coefficient trajectories and ``evaluate``
compares against FE reference solves.
"""

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .deim import adaptive_rb_deim, classical_deim_offline
from .discretization import build_operators, make_time_grid
from .estimators import (
    DegenerateErrorError,
    EstimateReport,
    delta_L,
    delta_masslump,
    delta_P,
    delta_rb,
    delta_rb_L,
    poincare_constant,
    true_errors,
)
from .numerics import parallel_map
from .problem import ProblemDefinition, make_example1, make_example2
from .reduction import FECache, RBBasis, evaluate_reduced, greedy_rb
from .solvers import NewtonSettings, fe_solve

__all__ = [
    "PODGreedyRB",
    "ClassicalRBDEIM",
    "AdaptiveRBDEIM",
    "resolve_problem",
    "metrics_speedup",
    "summarize_reports",
]

EXAMPLES = {"example1": make_example1, "example2": make_example2}


def resolve_problem(problem, T=None):
    """Problem definition from a name or an instance, optionally with a new horizon."""
    if isinstance(problem, str):
        if problem not in EXAMPLES:
            raise ValueError(f"unknown example {problem!r}; choose from {sorted(EXAMPLES)}")
        problem = EXAMPLES[problem]()
    if not isinstance(problem, ProblemDefinition):
        raise TypeError(f"problem must be a name or ProblemDefinition, got {type(problem).__name__}")
    return problem if T is None else problem.with_final_time(T)


def metrics_speedup(test_set, fe_times, reduced_times):
    """Mean over the test set of ``t_FE / t_reduced``."""
    fe = np.asarray(fe_times, dtype=float)
    red = np.asarray(reduced_times, dtype=float)
    if fe.shape != red.shape or fe.shape[0] != len(test_set):
        raise ValueError("one FE and one reduced time per test parameter are required")
    if np.any(red <= 0) or np.any(fe <= 0):
        raise ValueError("timings must be positive")
    return float(np.mean(fe / red))


def _mean(values):
    v = np.asarray(values, dtype=float)
    finite = v[~np.isnan(v)]
    return float(np.mean(finite)) if finite.size else float("nan")


def summarize_reports(reports):
    """Test-set averages of the per-parameter columns (NaN entries skipped)."""
    rows = [r.row() for r in reports]
    keys = [k for k in rows[0] if not k.startswith("mu")]
    out = {f"av_{k}": _mean([row[k] for row in rows]) for k in keys}
    out["av_speedup"] = metrics_speedup(
        reports, [r.t_fe_seconds for r in reports], [r.t_reduced_seconds for r in reports]
    )
    out["n_test"] = len(reports)
    return out


class _ReducedModel(BaseEstimator):
    """Shared fit/predict/evaluate machinery."""

    def _settings(self):
        return NewtonSettings(tol=self.newton_tol, max_iter=self.newton_max_iter)

    def _prepare(self, X):
        self.problem_ = resolve_problem(self.problem, self.T)
        X = self._check_parameters(X, reset=True)
        self.ops_ = build_operators(self.n, self.problem_.T, self.K)
        self.fe_cache_ = FECache(self.problem_, self.ops_, self._settings())
        return X

    def _check_parameters(self, X, reset=False):
        X = check_array(X, ensure_2d=False, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if self.problem_.box.dim == 1 else X.reshape(1, -1)
        if X.shape[1] != self.problem_.box.dim:
            raise ValueError(f"expected {self.problem_.box.dim} parameter components, got {X.shape[1]}")
        for mu in X:
            self.problem_.check_parameter(mu)
        if reset:
            self.n_features_in_ = X.shape[1]
        return X

    @property
    def deim_(self):
        return getattr(self, "_deim", None)

    def _reduced(self, mu):
        return evaluate_reduced(self.basis_, self.problem_, mu, self._settings(), self.deim_)

    def _estimate_one(self, mu, y):
        if self.deim_ is None:
            return delta_rb(mu, y, self.ops_, self.problem_), 0.0
        return (
            delta_rb_L(mu, y, self.deim_, self.ops_, self.problem_),
            delta_L(mu, y, self.deim_, self.ops_, self.problem_, self.c_P_),
        )

    def predict(self, X):
        """Reduced coefficient trajectories, shape ``(n_samples, l, K+1)``."""
        check_is_fitted(self, "basis_")
        X = self._check_parameters(X)
        return np.stack([self._reduced(mu)[0] for mu in X])

    def lift(self, coefficients):
        """FE coefficient trajectories from reduced ones."""
        check_is_fitted(self, "basis_")
        return np.einsum("il,slk->sik", self.basis_.Psi, np.asarray(coefficients, dtype=float))

    def estimate(self, X):
        """Online error estimate per parameter (``Delta_rb`` or ``Delta_rb,L + Delta_L``)."""
        check_is_fitted(self, "basis_")
        X = self._check_parameters(X)

        def one(mu):
            _, y, _ = self._reduced(mu)
            return sum(self._estimate_one(mu, y))

        return np.array(parallel_map(one, list(X), self.n_jobs))

    def _evaluate_one(self, mu):
        settings = self._settings()
        start = time.perf_counter()
        y_fe, _ = fe_solve(self.ops_, self.problem_, mu, settings)
        t_fe = time.perf_counter() - start
        _, y, t_red = self._reduced(mu)
        delta, dL = self._estimate_one(mu, y)
        err = true_errors(mu, y_fe, y, self.ops_)
        degenerate = False
        try:
            dP = delta_P(mu, y_fe, y, self.ops_, self.problem_)
            dH = (
                delta_masslump(mu, y_fe, y, self.deim_, self.ops_, self.problem_, self.c_P_)
                if self.deim_ is not None
                else np.nan
            )
        except DegenerateErrorError:
            # the averaged error vanishes, so the bound holds with zero correction terms
            degenerate = True
            dP, dH = 0.0, (0.0 if self.deim_ is not None else np.nan)
        eff = (delta + dL) / err.PdeltaY if err.PdeltaY > 0 else np.nan
        return EstimateReport(
            mu=tuple(float(v) for v in mu), delta=delta, delta_L=dL, delta_P=dP, delta_mass=dH,
            err_PdeltaY=err.PdeltaY, err_Y=err.Y, efficiency=eff,
            t_fe_seconds=t_fe, t_reduced_seconds=t_red,
            extra={"err_H": err.H, "degenerate": degenerate},
        )

    def evaluate(self, X):
        """Validation reports with FE reference solves, one per parameter."""
        check_is_fitted(self, "basis_")
        X = self._check_parameters(X)
        return parallel_map(self._evaluate_one, list(X), self.n_jobs)

    def with_time_steps(self, K):
        """Copy of the fitted model evaluated on another uniform time grid."""
        check_is_fitted(self, "basis_")
        other = self.__class__(**{**self.get_params(), "K": int(K)})
        other.problem_ = self.problem_
        other.n_features_in_ = self.n_features_in_
        other.ops_ = self.ops_.with_grid(make_time_grid(self.problem_.T, K))
        other.fe_cache_ = FECache(self.problem_, other.ops_, self._settings())
        other.basis_ = RBBasis(other.ops_, self.basis_.Psi)
        other._deim = self.deim_
        other.c_P_ = self.c_P_
        other.offline_seconds_ = dict(self.offline_seconds_)
        other.trace_ = self.trace_
        return other

    def set_trained(self, Psi, deim=None):
        """Attach a previously trained basis (and DEIM data) without training."""
        self.problem_ = resolve_problem(self.problem, self.T)
        self.n_features_in_ = self.problem_.box.dim
        self.ops_ = build_operators(self.n, self.problem_.T, self.K)
        if np.shape(Psi)[0] != self.ops_.N:
            raise ValueError(f"basis has {np.shape(Psi)[0]} rows but the mesh has {self.ops_.N} unknowns")
        self.fe_cache_ = FECache(self.problem_, self.ops_, self._settings())
        self.basis_ = RBBasis(self.ops_, Psi)
        self._deim = deim
        self.c_P_ = poincare_constant(self.ops_) if deim is not None else None
        self.offline_seconds_ = {"rb": 0.0, "deim": 0.0}
        self.trace_ = None
        return self

    @property
    def sizes_(self):
        return self.basis_.size, (self.deim_.size if self.deim_ is not None else 0)


class PODGreedyRB(_ReducedModel):
    """POD-greedy reduced basis without hyper-reduction.

    Parameters
    ----------
    problem : str or ProblemDefinition
        ``"example1"``, ``"example2"`` or a problem instance.
    n : int
        Mesh parameter ``1/h``.
    K : int
        Number of uniform time steps.
    T : float, optional
        Overrides the final time of the problem.
    tol : float
        Greedy tolerance.
    error_mode : {"estimator", "true_error"}
        Selection criterion of the greedy loop.
    """

    def __init__(
        self, problem="example1", n=50, K=400, T=None, tol=1e-3, error_mode="estimator",
        newton_tol=1e-10, newton_max_iter=50, n_jobs=1,
    ):
        self.problem = problem
        self.n = n
        self.K = K
        self.T = T
        self.tol = tol
        self.error_mode = error_mode
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = self._prepare(X)
        start = time.perf_counter()
        self.basis_, self.trace_ = greedy_rb(
            self.problem_, self.ops_, X, self.tol, mode=self.error_mode,
            settings=self._settings(), fe_cache=self.fe_cache_, n_jobs=self.n_jobs,
        )
        self.offline_seconds_ = {"rb": time.perf_counter() - start, "deim": 0.0}
        self._deim = None
        self.c_P_ = None
        return self


class ClassicalRBDEIM(_ReducedModel):
    """DEIM built offline from training snapshots, followed by POD-greedy RB.

    The greedy loop uses RB-DEIM solves and the estimator
    ``Delta_rb,L + Delta_L``.

    Parameters
    ----------
    deim_size : int
        Requested number of DEIM modes (capped by the snapshot rank).
    deim_train : array-like, optional
        Parameters for the DEIM snapshots; the RB training set by default.
    """

    def __init__(
        self, problem="example1", n=50, K=400, T=None, tol=1e-3, deim_size=72, deim_train=None,
        newton_tol=1e-10, newton_max_iter=50, n_jobs=1,
    ):
        self.problem = problem
        self.n = n
        self.K = K
        self.T = T
        self.tol = tol
        self.deim_size = deim_size
        self.deim_train = deim_train
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = self._prepare(X)
        deim_X = X if self.deim_train is None else self._check_parameters(self.deim_train)
        start = time.perf_counter()
        self._deim = classical_deim_offline(
            self.problem_, self.ops_, deim_X, self.deim_size, self.fe_cache_, self._settings()
        )
        t_deim = time.perf_counter() - start
        self.c_P_ = poincare_constant(self.ops_)
        start = time.perf_counter()
        self.basis_, self.trace_ = greedy_rb(
            self.problem_, self.ops_, X, self.tol, settings=self._settings(), fe_cache=self.fe_cache_,
            deim=self._deim, c_P=self.c_P_, n_jobs=self.n_jobs,
        )
        self.offline_seconds_ = {"rb": time.perf_counter() - start, "deim": t_deim}
        return self


class AdaptiveRBDEIM(_ReducedModel):
    """Interleaved RB and DEIM growth driven by ``Delta_rb,L + Delta_L``.

    Parameters
    ----------
    tol, tol_rb, tol_L : float
        Total, RB and DEIM tolerances with ``tol >= tol_rb + tol_L``.
    """

    def __init__(
        self, problem="example1", n=50, K=400, T=None, tol=1e-3, tol_rb=1e-4, tol_L=1e-5,
        newton_tol=1e-10, newton_max_iter=50, n_jobs=1,
    ):
        self.problem = problem
        self.n = n
        self.K = K
        self.T = T
        self.tol = tol
        self.tol_rb = tol_rb
        self.tol_L = tol_L
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = self._prepare(X)
        start = time.perf_counter()
        self.c_P_ = poincare_constant(self.ops_)
        self.basis_, self._deim, self.trace_ = adaptive_rb_deim(
            self.problem_, self.ops_, X, self.tol, self.tol_rb, self.tol_L,
            settings=self._settings(), fe_cache=self.fe_cache_, c_P=self.c_P_, n_jobs=self.n_jobs,
        )
        self.offline_seconds_ = {"rb": time.perf_counter() - start, "deim": 0.0}
        return self
