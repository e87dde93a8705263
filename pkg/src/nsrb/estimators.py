"""Residuals, dual norms and a-posteriori error estimators.

Trajectories passed to these functions are FE coefficient matrices of shape
``(N, K+1)``; reduced solutions must be lifted first (``Psi @ y_r``).
Residual functionals act on piecewise-constant-in-time test functions and
are stored as slab vectors ``r^k`` (shape ``(N, K)``).
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .discretization import (
    assemble_source_matrix,
    averaging_defect_norm,
    piecewise_constant_norm,
    space_time_inner,
    time_average,
)

__all__ = [
    "DegenerateErrorError",
    "EstimateReport",
    "assemble_residual",
    "assemble_residual_rb",
    "assemble_residual_rb_deim",
    "dual_norm_Y",
    "delta_rb",
    "delta_rb_L",
    "delta_P",
    "delta_L",
    "deim_deviation",
    "mass_lumping_error",
    "delta_masslump",
    "poincare_constant",
    "true_errors",
    "TrueErrors",
]

DEGENERATE_TOL = 1e-14


class DegenerateErrorError(ValueError):
    """The averaged error trajectory vanishes, so the quotient is undefined."""

    def __init__(self, norm):
        self.norm = float(norm)
        super().__init__(f"degenerate error trajectory: ||P e||_Y = {self.norm:.3e}")


def _source(problem, mu, ops, F):
    return assemble_source_matrix(problem, mu, ops) if F is None else F


def assemble_residual(ops, problem, mu, y, F=None, nonlinear=None):
    """Slab residuals ``r^k = -dt_k G^k(y)``.

    ``nonlinear`` maps the matrix ``max(0, y)`` to the vectors that replace
    it inside the lumped mass term (identity by default).
    """
    mu = problem.check_parameter(mu)
    F = _source(problem, mu, ops, F)
    c, a = problem.c(mu), problem.a(mu)
    dt = ops.dt
    m = np.maximum(y, 0.0)
    if nonlinear is not None:
        m = nonlinear(m)
    n = ops.lumped[:, None] * m
    dy = np.diff(y, axis=1)
    ssum = y[:, 1:] + y[:, :-1]
    return (
        0.5 * dt * (F[:, 1:] + F[:, :-1])
        - ops.M @ dy
        - 0.5 * c * dt * (ops.V @ ssum)
        - 0.5 * a * dt * (n[:, 1:] + n[:, :-1])
    )


def assemble_residual_rb(ops, problem, mu, y, F=None):
    """Residual of a (lifted) RB trajectory with the exact lumped nonlinearity."""
    return assemble_residual(ops, problem, mu, y, F)


def assemble_residual_rb_deim(ops, problem, mu, y, deim, F=None):
    """Residual with the nonlinearity replaced by its DEIM interpolant."""
    return assemble_residual(ops, problem, mu, y, F, nonlinear=deim.apply)


def dual_norm_Y(res, ops, V_factor=None):
    """Dual norm over piecewise-constant-in-time test functions.

    Computes ``(sum_k (r^k)^T V^{-1} r^k / dt_k)^(1/2)`` with one Riesz
    solve per slab.
    """
    factor = ops.V_factor if V_factor is None else V_factor
    Z = factor.solve(res)
    vals = np.einsum("ik,ik->k", res, Z)
    return float(np.sqrt(max(np.sum(vals / ops.dt), 0.0)))


def delta_rb(mu, y, ops, problem, F=None):
    """RB residual estimator ``||R||_{Y'} / c``."""
    res = assemble_residual_rb(ops, problem, mu, y, F)
    return float(dual_norm_Y(res, ops) / problem.c(mu))


def delta_rb_L(mu, y, deim, ops, problem, F=None):
    """RB-DEIM residual estimator ``||R_L||_{Y'} / c``."""
    res = assemble_residual_rb_deim(ops, problem, mu, y, deim, F)
    return float(dual_norm_Y(res, ops) / problem.c(mu))


def _averaged_error(y_fe, y_red, ops):
    e = y_fe - y_red
    Pe = time_average(e)
    norm = piecewise_constant_norm(Pe, ops.V, ops.dt)
    return e, Pe, norm


def delta_P(mu, y_fe, y_red, ops, problem):
    """Projection estimator for the slab-averaging test function.

    Raises
    ------
    DegenerateErrorError
        If ``||P e||_Y`` falls below ``1e-14``.
    """
    e, Pe, norm = _averaged_error(y_fe, y_red, ops)
    if norm < DEGENERATE_TOL:
        raise DegenerateErrorError(norm)
    a, c = problem.a(mu), problem.c(mu)
    if a == 0.0:
        return 0.0
    dm = np.maximum(y_fe, 0.0) - np.maximum(y_red, 0.0)
    dm_norm = np.sqrt(max(space_time_inner(dm, dm, ops.M, ops.dt), 0.0))
    return float(a / c * dm_norm * averaging_defect_norm(e, ops.M, ops.dt) / norm)


def deim_deviation(y, deim):
    """Slab values of ``I_L max(0, y) - max(0, y)`` (trapezoidal averaging)."""
    m = np.maximum(y, 0.0)
    return time_average(deim.apply(m) - m)


def delta_L(mu, y, deim, ops, problem, c_P):
    """DEIM estimator ``c_P a / c * ||I_L max(0,y) - max(0,y)||`` in the lumped norm."""
    d = deim_deviation(y, deim)
    return float(c_P * problem.a(mu) / problem.c(mu) * piecewise_constant_norm(d, ops.lumped, ops.dt))


def mass_lumping_error(phi, psi, ops):
    """``|<phi, psi>_M - <phi, psi>_Mlump|`` integrated exactly in time."""
    return abs(space_time_inner(phi, psi, ops.M, ops.dt) - space_time_inner(phi, psi, ops.lumped, ops.dt))


def delta_masslump(mu, y_fe, y_red, deim, ops, problem, c_P=None):
    """Mass-lumping estimator of the RB-DEIM bound.

    ``c_P`` is accepted for signature symmetry with :func:`delta_L`; the
    formula does not use it.
    """
    _, Pe, norm = _averaged_error(y_fe, y_red, ops)
    if norm < DEGENERATE_TOL:
        raise DegenerateErrorError(norm)
    a, c = problem.a(mu), problem.c(mu)
    if a == 0.0:
        return 0.0
    m = np.maximum(y_red, 0.0)
    d = deim_deviation(y_red, deim)
    d_norm = piecewise_constant_norm(d, ops.lumped, ops.dt)
    bracket = mass_lumping_error(m, Pe, ops) + d_norm * mass_lumping_error(Pe, Pe, ops)
    return float(a / (c * norm) * bracket)


def poincare_constant(ops, tol=1e-12, max_iter=5000):
    """Discrete Poincare constant ``1 / sqrt(lambda_min)`` of ``V x = lambda M x``.

    Inverse iteration with the cached stiffness factorization, started from
    the constant vector (which is not orthogonal to the first eigenvector).
    """
    x = np.ones(ops.N)
    x /= np.sqrt(x @ (ops.M @ x))
    lam = np.inf
    for _ in range(max_iter):
        z = ops.V_factor.solve(ops.M @ x)
        z /= np.sqrt(z @ (ops.M @ z))
        lam_new = float(z @ (ops.V @ z))
        x = z
        if abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return 1.0 / np.sqrt(lam)


@dataclass(frozen=True)
class TrueErrors:
    PdeltaY: float
    Y: float
    H: float


def true_errors(mu, y_fe, y_red, ops):
    """Norms of ``e = y_fe - y_red``: ``||P e||_Y``, ``||e||_Y`` and ``||e||_H``."""
    e = y_fe - y_red
    Pe = time_average(e)
    return TrueErrors(
        PdeltaY=piecewise_constant_norm(Pe, ops.V, ops.dt),
        Y=float(np.sqrt(max(space_time_inner(e, e, ops.V, ops.dt), 0.0))),
        H=float(np.sqrt(max(space_time_inner(e, e, ops.M, ops.dt), 0.0))),
    )


@dataclass
class EstimateReport:
    """Per-parameter estimator and validation record."""

    mu: tuple
    delta: float
    delta_L: float = 0.0
    delta_P: float = np.nan
    delta_mass: float = np.nan
    err_PdeltaY: float = np.nan
    err_Y: float = np.nan
    efficiency: float = np.nan
    t_fe_seconds: float = np.nan
    t_reduced_seconds: float = np.nan
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def estimate(self):
        return self.delta + self.delta_L

    def bound(self):
        """Sum of all available estimator terms."""
        return self.delta + self.delta_L + np.nan_to_num(self.delta_P) + np.nan_to_num(self.delta_mass)

    def row(self):
        d = asdict(self)
        d.pop("extra")
        mu = d.pop("mu")
        out = {f"mu{i + 1}": float(v) for i, v in enumerate(mu)}
        out["delta_rb_or_rbL"] = d.pop("delta")
        out.update(d)
        return out
