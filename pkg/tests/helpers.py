import numpy as np
from scipy.integrate import dblquad, quad

from nsrb.problem import make_problem_from_expressions
from nsrb.reduction import RBBasis


def full_basis(ops):
    """V-orthonormal basis of the whole FE space."""
    L = np.linalg.cholesky(ops.V.toarray())
    return RBBasis(ops, np.linalg.inv(L).T)


def linear_problem(T=1.0, spatial="(0.5 - x1)*sin(pi*x1)*sin(pi*x2)"):
    """Example-1-like data without reaction term."""
    return make_problem_from_expressions(
        [-2.0], [2.0], T, "1 + 0.25*abs(mu[0])", "0*mu[0]",
        [spatial], ["mu[0]"], "10*sin(4*pi*t)*sqrt(1+t)",
    )


def source_norm_sq(problem, mu):
    """Space-time L2 norm squared of the continuous source, by adaptive quadrature."""
    sep = problem.separable
    beta = np.asarray(sep.beta(np.atleast_1d(mu)), dtype=float)

    def g(x2, x1):
        return float(sum(b * gi(np.array(x1), np.array(x2)) for b, gi in zip(beta, sep.spatial)) ** 2)

    space = 0.0
    for lo, hi in ((0.0, 0.5), (0.5, 1.0)):
        space += dblquad(g, lo, hi, 0.0, 1.0, epsabs=1e-14, epsrel=1e-12)[0]
    time_part = quad(lambda t: float(sep.gamma(t)) ** 2, 0.0, problem.T, limit=500, epsabs=1e-13, epsrel=1e-12)[0]
    return space * time_part
