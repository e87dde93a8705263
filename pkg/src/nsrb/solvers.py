"""Semismooth Newton time stepping for the FE, RB and RB-DEIM systems.

All three levels solve, for ``k = 1..K``, the Crank-Nicolson root problem

    M (y^k - y^{k-1}) / dt_k
        + (c V (y^k + y^{k-1}) + a N(y^k) + a N(y^{k-1}) - F^k - F^{k-1}) / 2 = 0

with ``N`` the (lumped, possibly interpolated) nonlinearity ``max(0, .)``.
Generalized Jacobians use the Heaviside diagonal with value 0 at the origin.
"""

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .discretization import assemble_source_matrix, source_factors, temporal_source_factor
from .numerics import SpdFactorization, band_fits, lower_banded, spd_factorize

__all__ = [
    "NewtonSettings",
    "SolveStats",
    "NewtonError",
    "ReducedSystem",
    "heaviside",
    "semismooth_newton",
    "fe_step_residual",
    "fe_step_jacobian",
    "fe_solve",
    "rb_solve",
    "rb_deim_solve",
    "reduced_source",
]


@dataclass(frozen=True)
class NewtonSettings:
    """Stopping rule ``||G||_2 <= tol * (1 + ||F^k||_2)`` and iteration cap."""

    tol: float = 1e-10
    max_iter: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"Newton tolerance must be positive, got {self.tol}")
        if int(self.max_iter) < 1:
            raise ValueError(f"need max_iter >= 1, got {self.max_iter}")


@dataclass
class SolveStats:
    iterations: np.ndarray
    seconds: float = 0.0
    K: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def total_iterations(self):
        return int(np.sum(self.iterations))


class NewtonError(RuntimeError):
    """Newton iteration did not reach the tolerance."""

    def __init__(self, message, residual_norm=np.nan, step=None, mu=None):
        self.residual_norm = float(residual_norm)
        self.step = step
        self.mu = None if mu is None else np.asarray(mu).tolist()
        where = []
        if step is not None:
            where.append(f"time step {step}")
        if self.mu is not None:
            where.append(f"mu={self.mu}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}; last residual norm {self.residual_norm:.3e}{suffix}")


def heaviside(v):
    """Generalized derivative of ``max(0, v)``: 1 where ``v > 0``, else 0."""
    return (np.asarray(v) > 0.0).astype(float)


def _as_solver(J):
    if hasattr(J, "solve"):
        return J
    return spd_factorize(J)


def semismooth_newton(residual, jacobian, start, settings=None, scale=0.0):
    """Full-step semismooth Newton iteration.

    Parameters
    ----------
    residual : callable
        ``y -> G(y)``.
    jacobian : callable
        ``y -> H(y)``; either an SPD matrix (sparse or dense) or an object
        with a ``solve`` method.
    start : ndarray
    settings : NewtonSettings, optional
    scale : float
        Load magnitude entering the relative stopping rule.

    Returns
    -------
    root : ndarray
    iterations : int
        Number of Newton updates performed.
    """
    settings = settings or NewtonSettings()
    tol = settings.tol * (1.0 + scale)
    y = np.array(start, dtype=float)
    g = residual(y)
    norm = float(np.linalg.norm(g))
    for it in range(settings.max_iter + 1):
        if norm <= tol:
            return y, it
        if it == settings.max_iter:
            break
        y = y - _as_solver(jacobian(y)).solve(g)
        g = residual(y)
        norm = float(np.linalg.norm(g))
        if not np.isfinite(norm):
            break
    raise NewtonError(f"semismooth Newton failed after {settings.max_iter} iterations", norm)


def fe_step_residual(ops, problem, mu, y_prev, y_k, F_prev, F_k, dt):
    """Crank-Nicolson residual ``G^k(y^k)`` of the FE system."""
    c, a = problem.c(mu), problem.a(mu)
    lump = ops.lumped
    return (ops.M @ (y_k - y_prev)) / dt + 0.5 * (
        c * (ops.V @ (y_k + y_prev))
        + a * lump * (np.maximum(y_k, 0.0) + np.maximum(y_prev, 0.0))
        - (F_k + F_prev)
    )


def fe_step_jacobian(ops, problem, mu, y_k, dt):
    """Newton matrix ``M/dt + (c V + a Mlump Theta(y^k)) / 2`` as sparse CSR."""
    c, a = problem.c(mu), problem.a(mu)
    d = 0.5 * a * ops.lumped * heaviside(y_k)
    return (ops.M / dt + 0.5 * c * ops.V + sp.diags(d)).tocsr()


class _FEStepper:
    """Per-parameter FE step operators with a small factorization cache."""

    def __init__(self, ops, c, a, cache_size=8):
        self.ops, self.c, self.a = ops, c, a
        self.banded = band_fits(ops.V)
        self._linear = {}
        self._factors = OrderedDict()
        self.cache_size = cache_size
        self.factorizations = 0

    def linear(self, dt):
        if dt not in self._linear:
            A = (self.ops.M / dt + 0.5 * self.c * self.ops.V).tocsr()
            self._linear[dt] = (A, lower_banded(A) if self.banded else None)
        return self._linear[dt]

    def factor(self, dt, y):
        active = y > 0.0
        key = (dt, np.packbits(active).tobytes())
        f = self._factors.get(key)
        if f is not None:
            self._factors.move_to_end(key)
            return f
        A, ab = self.linear(dt)
        d = 0.5 * self.a * self.ops.lumped * active
        if ab is not None:
            ab = ab.copy()
            ab[0] += d
            f = SpdFactorization.from_banded(ab)
        else:
            f = spd_factorize((A + sp.diags(d)).tocsc())
        self.factorizations += 1
        self._factors[key] = f
        if len(self._factors) > self.cache_size:
            self._factors.popitem(last=False)
        return f


def fe_solve(ops, problem, mu, settings=None, F=None):
    """Full-order trajectory ``y`` of shape ``(N, K+1)`` with ``y^0 = 0``."""
    mu = problem.check_parameter(mu)
    settings = settings or NewtonSettings()
    if F is None:
        F = assemble_source_matrix(problem, mu, ops)
    c, a = problem.c(mu), problem.a(mu)
    stepper = _FEStepper(ops, c, a)
    lump = ops.lumped
    N, K = ops.N, ops.K
    y = np.zeros((N, K + 1))
    iters = np.zeros(K, dtype=int)
    start = time.perf_counter()
    for k in range(1, K + 1):
        dt = float(ops.dt[k - 1])
        A, _ = stepper.linear(dt)
        yp = y[:, k - 1]
        const = -(ops.M @ yp) / dt + 0.5 * (
            c * (ops.V @ yp) + a * lump * np.maximum(yp, 0.0) - F[:, k] - F[:, k - 1]
        )

        def residual(v):
            return A @ v + 0.5 * a * lump * np.maximum(v, 0.0) + const

        try:
            y[:, k], iters[k - 1] = semismooth_newton(
                residual, lambda v: stepper.factor(dt, v), yp, settings,
                scale=float(np.linalg.norm(F[:, k])),
            )
        except NewtonError as exc:
            raise NewtonError("FE solve failed", exc.residual_norm, step=k, mu=mu) from exc
    stats = SolveStats(iters, time.perf_counter() - start, K)
    stats.extra["factorizations"] = stepper.factorizations
    return y, stats


def reduced_source(problem, mu, ops, Psi, projected_factors=None):
    """Reduced loads ``Psi^T F^k`` as an ``l x (K+1)`` matrix."""
    if problem.separable is not None:
        if projected_factors is None:
            projected_factors = Psi.T @ source_factors(problem, ops)
        beta = np.asarray(problem.separable.beta(mu), dtype=float)
        return np.outer(projected_factors @ beta, temporal_source_factor(problem, ops.grid))
    return Psi.T @ assemble_source_matrix(problem, mu, ops)


class ReducedSystem:
    """Projected operators for RB and RB-DEIM solves.

    Parameters
    ----------
    Psi : ndarray, shape (N, l)
        V-orthonormal reduced basis.
    ops : FEOperators
    deim : DeimData, optional
        When given, ``W = Psi^T Mlump Phi (P^T Phi)^{-1}`` and the sampled
        rows ``P^T Psi`` are precomputed so that online work is independent
        of ``N``.
    """

    def __init__(self, Psi, ops, deim=None):
        self.Psi = Psi
        self.ops = ops
        self.Mr = Psi.T @ (ops.M @ Psi)
        self.Vr = Psi.T @ (ops.V @ Psi)
        self.Mr = 0.5 * (self.Mr + self.Mr.T)
        self.Vr = 0.5 * (self.Vr + self.Vr.T)
        self.lumpPsi = ops.lumped[:, None] * Psi
        self._factors = {}
        self.deim = deim
        if deim is not None:
            self.W = deim.interpolation_weights(self.lumpPsi)
            self.PPsi = Psi[deim.indices]
        else:
            self.W = self.PPsi = None

    @property
    def size(self):
        return self.Psi.shape[1]

    def projected_factors(self, problem):
        key = id(problem.separable)
        if key not in self._factors:
            self._factors[key] = (problem.separable, self.Psi.T @ source_factors(problem, self.ops))
        return self._factors[key][1]

    def source(self, problem, mu):
        pf = self.projected_factors(problem) if problem.separable is not None else None
        return reduced_source(problem, mu, self.ops, self.Psi, pf)


class _DenseSPD:
    def __init__(self, H):
        self.f = spd_factorize(0.5 * (H + H.T), method="dense")

    def solve(self, b):
        return self.f.solve(b)


class _DenseLU:
    def __init__(self, H):
        self.lu = la.lu_factor(H, check_finite=True)

    def solve(self, b):
        return la.lu_solve(self.lu, b)


def _reduced_march(system, problem, mu, settings, nonlinear, nonlinear_jac, factor, label):
    mu = problem.check_parameter(mu)
    settings = settings or NewtonSettings()
    ops = system.ops
    K, l = ops.K, system.size
    y = np.zeros((l, K + 1))
    iters = np.zeros(K, dtype=int)
    start = time.perf_counter()
    if l == 0:
        return y, SolveStats(iters, time.perf_counter() - start, K)
    c, a = problem.c(mu), problem.a(mu)
    Fr = system.source(problem, mu)
    for k in range(1, K + 1):
        dt = float(ops.dt[k - 1])
        A = system.Mr / dt + 0.5 * c * system.Vr
        yp = y[:, k - 1]
        const = -(system.Mr @ yp) / dt + 0.5 * (
            c * (system.Vr @ yp) + a * nonlinear(yp) - Fr[:, k] - Fr[:, k - 1]
        )

        def residual(v):
            return A @ v + 0.5 * a * nonlinear(v) + const

        def jacobian(v):
            return factor(A + 0.5 * a * nonlinear_jac(v))

        try:
            y[:, k], iters[k - 1] = semismooth_newton(
                residual, jacobian, yp, settings, scale=float(np.linalg.norm(Fr[:, k]))
            )
        except (NewtonError, np.linalg.LinAlgError) as exc:
            norm = getattr(exc, "residual_norm", np.nan)
            raise NewtonError(f"{label} solve failed", norm, step=k, mu=mu) from exc
    return y, SolveStats(iters, time.perf_counter() - start, K)


def rb_solve(system, problem, mu, settings=None):
    """RB trajectory (coefficients, shape ``(l, K+1)``).

    The nonlinearity is evaluated on the lifted state,
    ``Psi^T Mlump max(0, Psi y)``, so the cost per Newton step scales with
    ``N``.
    """
    Psi, lumpPsi = system.Psi, system.lumpPsi

    def nonlinear(v):
        return lumpPsi.T @ np.maximum(Psi @ v, 0.0)

    def nonlinear_jac(v):
        act = (Psi @ v) > 0.0
        return Psi[act].T @ lumpPsi[act]

    return _reduced_march(system, problem, mu, settings, nonlinear, nonlinear_jac, _DenseSPD, "RB")


def rb_deim_solve(system, problem, mu, settings=None):
    """RB-DEIM trajectory; the nonlinearity is sampled at the DEIM rows only.

    The Newton matrix ``M_l/dt + (c V_l + a W Theta_L(P^T Psi y) P^T Psi) / 2``
    is not symmetric in general and is solved by LU.
    """
    if system.deim is None:
        raise ValueError("reduced system was built without DEIM data")
    W, PPsi = system.W, system.PPsi

    def nonlinear(v):
        return W @ np.maximum(PPsi @ v, 0.0)

    def nonlinear_jac(v):
        act = (PPsi @ v) > 0.0
        return W[:, act] @ PPsi[act]

    return _reduced_march(system, problem, mu, settings, nonlinear, nonlinear_jac, _DenseLU, "RB-DEIM")
