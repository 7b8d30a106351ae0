import math

import pytest

from faberkrahn.discretize import assemble_operators
from faberkrahn.grid import Grid
from faberkrahn.manifold import builtin_flat_torus, builtin_sphere
from faberkrahn.shapeopt import fk_minimize

TWO_PI = 2 * math.pi

# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def torus():
    return builtin_flat_torus(TWO_PI, TWO_PI)


@pytest.fixture(scope="session")
def sphere():
    return builtin_sphere(1.0)


@pytest.fixture(scope="session")
def torus_minimizer_128(torus):
    grid = Grid.for_chart(torus, 128)
    ops = assemble_operators(torus, grid)
    return fk_minimize(torus, grid, 0.5, ops=ops), ops


@pytest.fixture(scope="session")
def torus_minimizer_256(torus):
    grid = Grid.for_chart(torus, 256)
    ops = assemble_operators(torus, grid)
    return fk_minimize(torus, grid, 0.5, ops=ops), ops
