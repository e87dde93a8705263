import sys

import numpy as np
import pytest

from nsrb.discretization import assemble_operators, build_mesh, build_operators, make_time_grid
from nsrb.problem import make_example1, make_example2


@pytest.fixture(scope="session")
def ex1():
    return make_example1()


@pytest.fixture(scope="session")
def ex2():
    return make_example2()


@pytest.fixture(scope="session")
def ops_small(ex1):
    return build_operators(8, ex1.T, 40)


@pytest.fixture(scope="session")
def ops10():
    return assemble_operators(build_mesh(10), make_time_grid(1.0, 20))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
