import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faberkrahn.discretize import EmptySupportError, assemble_operators, integrate
from faberkrahn.eigensolve import ConvergenceError, rayleigh_quotient, smallest_eigenpair
from faberkrahn.geodesic import geodesic_ball, geodesic_ball_of_volume
from faberkrahn.grid import Grid
from faberkrahn.manifold import builtin_sphere
from faberkrahn.oracles import square_eigenvalue

from .test_discretize import square_support


@pytest.fixture(scope="module")
def torus64(torus):
    grid = Grid.for_chart(torus, 64)
    return grid, assemble_operators(torus, grid)


def face_square(grid, a, start=8):
    h = grid.h[0]
    return square_support(grid, a - 1e-9, corner=(h * (start - 0.5),) * 2)


def test_full_periodic_torus_has_constant_kernel(torus, torus64):
    grid, ops = torus64
    pair = smallest_eigenpair(ops, tol=1e-8)
    assert abs(pair.lam) < 1e-10
    assert np.ptp(pair.u) < 1e-6 * pair.u.max()


def test_square_support_eigenpair_invariants(torus):
    grid = Grid.for_chart(torus, 128)
    ops = assemble_operators(torus, grid)
    S = face_square(grid, math.pi)
    pair = smallest_eigenpair(ops, S, tol=1e-8)
    assert pair.lam == pytest.approx(square_eigenvalue(math.pi), rel=2 * grid.h[0] ** 2)
    assert integrate(torus, grid, pair.u**2) == pytest.approx(1.0, abs=1e-10)
    assert np.all(pair.u >= 0)
    assert np.all(pair.u[~S] == 0)
    assert pair.residual <= 1e-8 * pair.lam


def test_hemisphere_support(sphere):
    grid = Grid.for_chart(sphere, 128)
    ops = assemble_operators(sphere, grid)
    TH, _ = grid.mesh()
    pair = smallest_eigenpair(ops, TH < math.pi / 2, tol=1e-8)
    assert pair.lam == pytest.approx(2.0, rel=0.02)


def test_empty_support_and_bad_tol(torus64):
    grid, ops = torus64
    with pytest.raises(EmptySupportError):
        smallest_eigenpair(ops, np.zeros(grid.shape, bool))
    with pytest.raises(ValueError):
        smallest_eigenpair(ops, face_square(grid, 1.0), tol=0.0)


def test_nonconvergence_reports_best(torus64):
    grid, ops = torus64
    with pytest.raises(ConvergenceError) as exc:
        smallest_eigenpair(ops, face_square(grid, 2.0), tol=1e-14, max_iter=1)
    assert exc.value.best is not None


def test_deterministic_given_seed(torus64):
    grid, ops = torus64
    S = face_square(grid, 2.0)
    a = smallest_eigenpair(ops, S, seed=5)
    b = smallest_eigenpair(ops, S, seed=5)
    assert a.lam == b.lam and np.array_equal(a.u, b.u)


def test_rayleigh_quotient_examples(torus):
    grid = Grid.for_chart(torus, 128)
    ops = assemble_operators(torus, grid)
    a = math.pi
    S = face_square(grid, a)
    pair = smallest_eigenpair(ops, S, tol=1e-10)
    assert rayleigh_quotient(ops, pair.u, S) == pytest.approx(pair.lam, rel=1e-9)
    rng = np.random.default_rng(0)
    bumped = pair.u + 0.05 * rng.random(grid.shape) * S
    assert rayleigh_quotient(ops, bumped, S) > pair.lam
    X, Y = grid.mesh()
    h = grid.h[0]
    x0 = h * 7.5
    prod = np.sin(math.pi * (X - x0) / a) * np.sin(math.pi * (Y - x0) / a) * S
    assert rayleigh_quotient(ops, prod, S) == pytest.approx(square_eigenvalue(a), rel=4 * h * h)
    with pytest.raises(ValueError):
        rayleigh_quotient(ops, np.zeros(grid.shape))


def test_domain_monotonicity_on_nested_balls(torus, torus64):
    grid, ops = torus64
    lams = []
    for r in (0.6, 0.9, 1.3):
        lams.append(smallest_eigenpair(ops, geodesic_ball(torus, grid, (3.0, 3.0), r)).lam)
    assert lams[0] >= lams[1] >= lams[2]


@given(st.floats(0.5, 3.0))
@settings(max_examples=5, deadline=None)
def test_metric_scaling_of_eigenvalue(c):
    sphere = builtin_sphere(1.0)
    grid = Grid.for_chart(sphere, 48)
    TH, _ = grid.mesh()
    S = TH < 1.0
    base = smallest_eigenpair(assemble_operators(sphere, grid), S, tol=1e-12).lam
    scaled = smallest_eigenpair(assemble_operators(sphere.scaled(c), grid), S, tol=1e-12).lam
    assert scaled == pytest.approx(base / c**2, rel=1e-8)


def test_ball_beats_square_and_annulus(torus):
    grid = Grid.for_chart(torus, 128)
    ops = assemble_operators(torus, grid)
    m = 1.0
    ball, _ = geodesic_ball_of_volume(torus, grid, (3.0, 3.0), m)
    X, Y = grid.mesh()
    a = math.sqrt(m)
    square = (np.abs(X - 3.0) < a / 2) & (np.abs(Y - 3.0) < a / 2)
    r_in = 0.3
    r_out = math.sqrt(m / math.pi + r_in**2)
    rr = np.hypot(X - 3.0, Y - 3.0)
    annulus = (rr > r_in) & (rr < r_out)
    lam = {name: smallest_eigenpair(ops, S).lam
           for name, S in (("ball", ball), ("square", square), ("annulus", annulus))}
    assert lam["ball"] < lam["square"] < lam["annulus"]


def test_cg_inner_solver_agrees_with_direct(torus64):
    grid, ops = torus64
    S = face_square(grid, 2.5)
    a = smallest_eigenpair(ops, S, tol=1e-9)
    b = smallest_eigenpair(ops, S, tol=1e-9, inner="cg")
    assert a.lam == pytest.approx(b.lam, rel=1e-8)
