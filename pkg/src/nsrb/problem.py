"""Parametrized problem data: admissible box, coefficients and source.

The state equation is ``y' - c(mu) lap(y) + a(mu) max(0, y) = f(t; mu)`` on the
unit square with homogeneous Dirichlet data and zero initial value.
"""

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ParameterBox",
    "SeparableSource",
    "ProblemDefinition",
    "make_example1",
    "make_example2",
    "make_problem_from_expressions",
    "sample_grid",
]


@dataclass(frozen=True)
class ParameterBox:
    """Box-shaped admissible parameter set ``[lower, upper]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) < 1:
            raise ValueError("lower and upper bounds need the same positive length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def midpoint(self):
        return 0.5 * (np.array(self.lower) + np.array(self.upper))

    def contains(self, mu, atol=1e-12):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape != (self.dim,):
            return False
        return bool(
            np.all(mu >= np.array(self.lower) - atol) and np.all(mu <= np.array(self.upper) + atol)
        )


@dataclass(frozen=True)
class SeparableSource:
    """Source written as ``sum_i beta_i(mu) g_i(x) * gamma(t)``.

    ``spatial`` holds the functions ``g_i(x1, x2)`` (vectorized over numpy
    arrays), ``beta`` maps a parameter to the coefficient vector and
    ``gamma`` is the temporal factor.
    """

    spatial: tuple
    beta: Callable
    gamma: Callable

    @property
    def n_terms(self):
        return len(self.spatial)


@dataclass(frozen=True)
class ProblemDefinition:
    """Data of one parametrized problem.

    Attributes
    ----------
    box : ParameterBox
    diffusion : callable
        ``c(mu) > 0``.
    reaction : callable
        ``a(mu) >= 0``.
    source : callable
        Continuous source ``f(t, x1, x2, mu)``, vectorized in ``x1, x2``.
    separable : SeparableSource or None
        Factorized form of ``source``; used for all assembly when present.
    T : float
        Final time.
    """

    name: str
    box: ParameterBox
    diffusion: Callable
    reaction: Callable
    source: Callable
    separable: Optional[SeparableSource]
    T: float
    description: str = field(default="", compare=False)

    def c(self, mu):
        return float(self.diffusion(np.atleast_1d(np.asarray(mu, dtype=float))))

    def a(self, mu):
        return float(self.reaction(np.atleast_1d(np.asarray(mu, dtype=float))))

    def check_parameter(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if not self.box.contains(mu):
            raise ValueError(
                f"parameter {mu.tolist()} outside admissible box "
                f"{list(self.box.lower)} .. {list(self.box.upper)}"
            )
        return mu

    def with_final_time(self, T):
        """Copy of the problem on a different time horizon."""
        return ProblemDefinition(
            self.name, self.box, self.diffusion, self.reaction, self.source, self.separable,
            float(T), self.description,
        )


def _time_factor(T):
    def gamma(t):
        return 10.0 * np.sin(4.0 * np.pi * t / T) * np.sqrt(1.0 + t)

    return gamma


def make_example1():
    """Scalar-parameter test case on ``[-10, 10]`` with ``T = 20``."""
    T = 20.0
    gamma = _time_factor(T)

    def g(x1, x2):
        return (0.5 - x1) * np.sin(np.pi * x1) * np.sin(np.pi * x2)

    def f(t, x1, x2, mu):
        return gamma(t) * g(x1, x2) * mu[0]

    return ProblemDefinition(
        name="example1",
        box=ParameterBox((-10.0,), (10.0,)),
        diffusion=lambda mu: 5.0 / (5.0 + abs(mu[0])),
        reaction=lambda mu: 1.0 + 2.0 * abs(mu[0]),
        source=f,
        separable=SeparableSource(spatial=(g,), beta=lambda mu: np.array([mu[0]]), gamma=gamma),
        T=T,
    )


def make_example2():
    """Two-parameter test case on ``[-2, 2]^2`` with ``T = 10``."""
    T = 10.0
    gamma = _time_factor(T)

    def g1(x1, x2):
        return np.where(x1 <= 0.5, x1 * x2, 0.0)

    def g2(x1, x2):
        return np.where(x1 <= 0.5, 0.0, x1**2 * x2**2)

    def f(t, x1, x2, mu):
        return gamma(t) * np.where(x1 <= 0.5, x1 * x2 * mu[0], x1**2 * x2**2 * mu[1])

    return ProblemDefinition(
        name="example2",
        box=ParameterBox((-2.0, -2.0), (2.0, 2.0)),
        diffusion=lambda mu: 3.0 / (1.0 + abs(mu[0])),
        reaction=lambda mu: 1.0 + 5.0 * float(np.linalg.norm(mu)),
        source=f,
        separable=SeparableSource(
            spatial=(g1, g2), beta=lambda mu: np.array([mu[0], mu[1]]), gamma=gamma
        ),
        T=T,
    )


_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in (
        "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "where", "pi", "minimum",
        "maximum", "sinh", "cosh", "tanh", "arctan", "heaviside",
    )
}
_EXPR_NAMESPACE["norm"] = np.linalg.norm


def _compile(expr, args):
    code = compile(expr, f"<expr {expr!r}>", "eval")
    namespace = {"__builtins__": {}, **_EXPR_NAMESPACE}

    def fn(*values):
        return eval(code, namespace, dict(zip(args, values)))

    fn.expression = expr
    return fn


def make_problem_from_expressions(
    lower: Sequence[float],
    upper: Sequence[float],
    T: float,
    diffusion: str,
    reaction: str,
    spatial: Sequence[str],
    beta: Sequence[str],
    gamma: str,
    name: str = "custom",
):
    """Build a separable problem from numpy expression strings.

    Expressions may use ``mu`` (parameter array), ``x1``, ``x2``, ``t`` and
    common numpy functions, e.g. ``diffusion="1 + 0.5*abs(mu[0])"``.
    """
    if len(spatial) != len(beta):
        raise ValueError("need one beta expression per spatial factor")
    c = _compile(diffusion, ("mu",))
    a = _compile(reaction, ("mu",))
    gs = tuple(_compile(e, ("x1", "x2")) for e in spatial)
    bs = tuple(_compile(e, ("mu",)) for e in beta)
    gam = _compile(gamma, ("t",))

    def g_broadcast(g):
        def fn(x1, x2):
            return np.broadcast_to(np.asarray(g(x1, x2), dtype=float), np.shape(x1))

        return fn

    spatial_fns = tuple(g_broadcast(g) for g in gs)

    def beta_fn(mu):
        return np.array([float(b(mu)) for b in bs])

    def gamma_fn(t):
        return float(gam(t))

    def f(t, x1, x2, mu):
        coeffs = beta_fn(mu)
        return gamma_fn(t) * sum(cf * g(x1, x2) for cf, g in zip(coeffs, spatial_fns))

    return ProblemDefinition(
        name=name,
        box=ParameterBox(tuple(lower), tuple(upper)),
        diffusion=c,
        reaction=a,
        source=f,
        separable=SeparableSource(spatial=spatial_fns, beta=beta_fn, gamma=gamma_fn),
        T=float(T),
    )


def sample_grid(box, counts):
    """Equidistant tensor grid including the box corners.

    Points are returned in lexicographic order (first component varies
    slowest) as an array of shape ``(n_points, dim)``.
    """
    counts = [int(c) for c in np.atleast_1d(counts)]
    if len(counts) == 1 and box.dim > 1:
        counts = counts * box.dim
    if len(counts) != box.dim:
        raise ValueError(f"need {box.dim} grid counts, got {len(counts)}")
    if any(c < 2 for c in counts):
        raise ValueError(f"every grid count must be at least 2, got {counts}")
    axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(box.lower, box.upper, counts)]
    return np.array(list(itertools.product(*axes)), dtype=float)
