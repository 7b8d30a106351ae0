import concurrent.futures as cf
import csv
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import ndimage

from faberkrahn.diagnostics import (DiagnosticsError, boundary_nodes, default_radii,
                                    density_formula_check, density_profile,
                                    fit_drift_constant, free_boundary_points,
                                    growth_bound_check, lagrange_multiplier_estimate,
                                    multiplier_from_field, nondegeneracy_check,
                                    perimeter_estimate, report_to_json, weiss_implied_multiplier,
                                    weiss_profile, write_diagnostics_csv)
from faberkrahn.discretize import cell_volumes
from faberkrahn.geodesic import geodesic_ball_of_volume
from faberkrahn.grid import Grid
from faberkrahn.manifold import builtin_flat_torus
from faberkrahn.oracles import disk_multiplier, interval_multiplier
from faberkrahn.shapeopt import fk_minimize

TWO_PI = 2 * math.pi
LAMBDA = 72.0


def half_plane(torus, n):
    """Strip ``{c < x < c + pi}`` carrying ``sqrt(L)`` times the distance to its edges."""
    grid = Grid.for_chart(torus, n)
    X, _ = grid.mesh()
    h = grid.h[0]
    c = X[n // 4, 0] + h / 2  # a cell face
    S = (X > c) & (X < c + math.pi)
    # tent so both edges of the strip carry slope sqrt(L)
    u = np.where(S, math.sqrt(LAMBDA) * np.minimum(X - c, c + math.pi - X), 0.0)
    return grid, SimpleNamespace(support=S, u=u), c


@pytest.fixture(scope="module")
def minimizer_reports(torus, torus_minimizer_128):
    res, ops = torus_minimizer_128
    grid = res.grid
    est = lagrange_multiplier_estimate(torus, grid, res)
    out = []
    for x0 in free_boundary_points(torus, grid, res.support, 12):
        x0 = tuple(x0)
        wp = weiss_profile(torus, grid, res, x0, Lambda=est.Lambda, ops=ops)
        dr = density_profile(torus, grid, res.support, x0)
        out.append((wp, dr))
    return est, out


# -- boundary_nodes --------------------------------------------------------------


def test_ball_boundary_is_one_closed_curve(torus):
    grid = Grid.for_chart(torus, 64)
    S, _ = geodesic_ball_of_volume(torus, grid, (3.0, 3.0), 2.0)
    nodes = boundary_nodes(grid, S)
    B = np.zeros(grid.size, bool)
    B[nodes] = True
    B = B.reshape(grid.shape)
    _, n_comp = ndimage.label(B, structure=np.ones((3, 3)))
    assert n_comp == 1
    # every boundary node has exactly two or more 8-neighbours on the curve
    nb = ndimage.convolve(B.astype(int), np.ones((3, 3), int), mode="wrap") - 1
    assert np.all(nb[B] >= 2)
    assert np.all(S[B])


def test_full_minus_one_node(torus):
    grid = Grid.for_chart(torus, 16)
    S = np.ones(grid.shape, bool)
    S[5, 9] = False
    got = set(boundary_nodes(grid, S).tolist())
    assert got == {int(grid.index(i, j)) for i, j in ((4, 9), (6, 9), (5, 8), (5, 10))}


def test_square_perimeter_count(torus):
    grid = Grid.for_chart(torus, 128)
    h = grid.h[0]
    a = 2.0
    X, Y = grid.mesh()
    S = (np.abs(X - 3.0) < a / 2) & (np.abs(Y - 3.0) < a / 2)
    assert abs(boundary_nodes(grid, S).size - 4 * a / h) <= 8


def test_boundary_nodes_errors(torus):
    grid = Grid.for_chart(torus, 8)
    with pytest.raises(DiagnosticsError):
        boundary_nodes(grid, np.zeros(grid.shape, bool))
    with pytest.raises(DiagnosticsError):
        boundary_nodes(grid, np.ones(grid.shape, bool))


# -- multiplier ------------------------------------------------------------------


def test_interval_multiplier():
    a = math.pi
    n = 256
    h = a / n
    strip = builtin_flat_torus(2 * a, 8 * h)
    grid = Grid.for_chart(strip, 2 * n, 8)
    X, _ = grid.mesh()
    c = X[n // 2, 0] - h / 2
    S = (X > c) & (X < c + a)
    u = np.where(S, math.sqrt(2 / a) * np.sin(math.pi * (X - c) / a), 0.0)
    est = multiplier_from_field(strip, grid, S, u)
    assert interval_multiplier(a) == pytest.approx(2 * math.pi**2 / a**3)
    assert est.Lambda == pytest.approx(interval_multiplier(a), rel=0.05)


def test_torus_multiplier_matches_disk(minimizer_reports):
    est, _ = minimizer_reports
    assert est.Lambda > 0
    assert est.Lambda == pytest.approx(disk_multiplier(0.5), rel=0.15)
    assert est.dispersion < 0.15


def test_half_plane_multiplier(torus):
    grid, res, _ = half_plane(torus, 128)
    est = multiplier_from_field(torus, grid, res.support, res.u)
    assert est.Lambda == pytest.approx(LAMBDA, rel=1e-9)
    assert est.dispersion < 1e-9


# -- Weiss and density -----------------------------------------------------------


@pytest.mark.parametrize("n", [128, 256])
def test_half_plane_weiss_is_flat(torus, n):
    grid, res, c = half_plane(torus, n)
    x0 = (c, math.pi)
    wp = weiss_profile(torus, grid, res, x0, Lambda=LAMBDA)
    half = LAMBDA * math.pi / 2
    assert np.all(np.abs(wp.phi / half - 1) <= 0.03)
    assert wp.C == 0.0
    assert wp.monotone(0.0)
    dr = density_profile(torus, grid, res.support, x0)
    h = grid.h[0]
    assert np.all(np.abs(dr.theta - 0.5) <= h / dr.radii)
    assert density_formula_check(wp, dr) <= 0.03


def test_interior_density_is_one(torus):
    grid = Grid.for_chart(torus, 128)
    S, _ = geodesic_ball_of_volume(torus, grid, (3.0, 3.0), 3.0)
    R = math.sqrt(3.0 / math.pi)
    radii = default_radii(torus, grid, (3.0, 3.0), n=5, r0=0.5 * R)
    dr = density_profile(torus, grid, S, (3.0, 3.0), radii=radii)
    assert np.all(dr.theta == 1.0)
    assert not dr.ok


def test_minimizer_weiss_and_density(minimizer_reports):
    est, reports = minimizer_reports
    for wp, dr in reports:
        assert wp.phi0 / (est.Lambda * math.pi) == pytest.approx(0.5, abs=0.1)
        assert math.isfinite(wp.C) and wp.C >= 0
        assert wp.monotone()
        assert np.all((dr.theta >= 0) & (dr.theta <= 1))
        assert dr.ok
        assert density_formula_check(wp, dr) <= 0.1
        assert dr.theta0 >= 0.5 - 0.05


def implied_multiplier(torus, res, ops, n_points=24):
    est = lagrange_multiplier_estimate(torus, res.grid, res)
    vals = []
    for x0 in free_boundary_points(torus, res.grid, res.support, n_points):
        x0 = tuple(x0)
        wp = weiss_profile(torus, res.grid, res, x0, Lambda=est.Lambda, ops=ops)
        dr = density_profile(torus, res.grid, res.support, x0)
        vals.append(weiss_implied_multiplier(wp, dr))
    return float(np.mean(vals)), est.Lambda


def test_multiplier_cross_consistency(torus, torus_minimizer_256):
    implied, lam = implied_multiplier(torus, *torus_minimizer_256)
    assert implied == pytest.approx(lam, rel=0.15)


def test_weiss_multiplier_bias_shrinks_under_refinement(torus, torus_minimizer_128,
                                                        torus_minimizer_256):
    # the boundary gradient grows inwards on a convex support, so the
    # smallest-ball energy overshoots Lambda by O(3h / R)
    bias = [abs(a / b - 1) for a, b in (implied_multiplier(torus, *torus_minimizer_128),
                                         implied_multiplier(torus, *torus_minimizer_256))]
    assert bias[1] < bias[0]


def test_fit_drift_constant():
    r = np.array([1.0, 2.0, 3.0])
    assert fit_drift_constant(r, [1.0, 2.0, 3.0]) == 0.0
    # a drop of 0.3 over r^2 from 1 to 4 needs C = 0.2
    assert fit_drift_constant(r, [1.0, 0.7, 1.0]) == pytest.approx(0.2)
    assert fit_drift_constant(r, [1.0, 0.7, 1.0], error=[0.15, 0.15, 0.15]) == pytest.approx(0.0, abs=1e-15)


def test_ball_exiting_truncation_edge():
    from faberkrahn.manifold import builtin_catenoid

    cat = builtin_catenoid(1.0, 2.0)
    grid = Grid.for_chart(cat, 64, 64)
    S = np.zeros(grid.shape, bool)
    S[:, :40] = True
    with pytest.raises(DiagnosticsError):
        density_profile(cat, grid, S, (math.pi, 1.8), radii=[0.3, 0.5])


def test_profiles_are_thread_safe(torus, torus_minimizer_128):
    res, ops = torus_minimizer_128
    grid = res.grid
    pts = [tuple(x) for x in free_boundary_points(torus, grid, res.support, 4)]

    def run(x0):
        return weiss_profile(torus, grid, res, x0, Lambda=50.0, ops=ops).phi

    serial = [run(x0) for x0 in pts]
    with cf.ThreadPoolExecutor(4) as ex:
        par = list(ex.map(run, pts))
    assert all(np.array_equal(a, b) for a, b in zip(serial, par))


# -- nondegeneracy / growth ------------------------------------------------------


def test_nondegeneracy_constant_positive(torus, torus_minimizer_128):
    res, _ = torus_minimizer_128
    rep = nondegeneracy_check(torus, res.grid, res)
    assert rep.constant > 0


def test_nondegeneracy_scales_like_root_multiplier(torus):
    scale = 2.0
    vals = []
    for chart, m in ((torus, 0.5), (torus.scaled(scale), 0.5 * scale**2)):
        grid = Grid.for_chart(chart, 64)
        res = fk_minimize(chart, grid, m)
        c = nondegeneracy_check(chart, grid, res).constant
        lam = lagrange_multiplier_estimate(chart, grid, res).Lambda
        vals.append((c, lam))
    (c1, l1), (c2, l2) = vals
    assert c1 / c2 == pytest.approx(math.sqrt(l1 / l2), rel=0.1)


def test_interior_average_grows_inward(torus, torus_minimizer_128):
    res, _ = torus_minimizer_128
    grid = res.grid
    r = 4 * grid.h[0]
    peak = np.unravel_index(np.argmax(res.u), grid.shape)
    edge = free_boundary_points(torus, grid, res.support, 1)[0]
    centre = np.array(grid.node_point(grid.index(*peak)))
    from faberkrahn.diagnostics import _scaled_averages

    line = [tuple(edge + t * (centre - edge)) for t in (0.0, 0.3, 0.6, 1.0)]
    vals = _scaled_averages(torus, grid, res.u, line, [r])[:, 0]
    assert np.all(np.diff(vals) > 0)


def test_growth_constant_finite_and_stable(torus, torus_minimizer_128, torus_minimizer_256):
    consts = []
    for res, _ in (torus_minimizer_128, torus_minimizer_256):
        radii = default_radii(torus, Grid.for_chart(torus, 128), (0.0, 0.0), n=6)
        rep = growth_bound_check(torus, res.grid, res, radii=radii)
        assert math.isfinite(rep.constant) and rep.constant > 0
        assert np.all(rep.values[rep.mask] <= rep.constant)
        consts.append(rep.constant)
    assert consts[1] == pytest.approx(consts[0], rel=0.2)


def test_growth_of_zero_field(torus, torus_minimizer_128):
    res, _ = torus_minimizer_128
    zero = SimpleNamespace(support=res.support, u=np.zeros(res.grid.shape))
    rep = growth_bound_check(torus, res.grid, zero, n_points=4, n_interior=4)
    assert rep.constant == 0.0 and np.all(rep.values == 0.0)


# -- perimeter -------------------------------------------------------------------


def test_perimeter_of_ball(torus):
    grid = Grid.for_chart(torus, 128)
    S, _ = geodesic_ball_of_volume(torus, grid, (3.0, 3.0), math.pi / 4)
    assert perimeter_estimate(torus, grid, S) == pytest.approx(math.pi, rel=0.1)


def test_perimeter_of_hemisphere(sphere):
    grid = Grid.for_chart(sphere, 128)
    TH, _ = grid.mesh()
    assert perimeter_estimate(sphere, grid, TH < math.pi / 2) == pytest.approx(TWO_PI, rel=0.1)


def test_perimeter_refinement(torus, torus_minimizer_128, torus_minimizer_256):
    p = [perimeter_estimate(torus, r.grid, r.support)
         for r, _ in (torus_minimizer_128, torus_minimizer_256)]
    assert p[1] == pytest.approx(p[0], rel=0.05)
    assert p[1] == pytest.approx(TWO_PI * math.sqrt(0.5 / math.pi), rel=0.1)


def test_perimeter_empty_support(torus):
    grid = Grid.for_chart(torus, 8)
    with pytest.raises(DiagnosticsError):
        perimeter_estimate(torus, grid, np.zeros(grid.shape, bool))


# -- export ----------------------------------------------------------------------


def test_json_and_csv_export(tmp_path, minimizer_reports):
    est, reports = minimizer_reports
    data = json.loads(report_to_json(est, tmp_path / "lam.json"))
    assert data["Lambda"] == est.Lambda
    assert json.loads((tmp_path / "lam.json").read_text()) == data
    path = tmp_path / "diagnostics.csv"
    write_diagnostics_csv(path, [wp for wp, _ in reports], [dr for _, dr in reports])
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["x0", "r", "phi", "theta", "Lambda"]
    assert len(rows) == sum(len(wp.radii) for wp, _ in reports)
    assert float(rows[0]["phi"]) == reports[0][0].phi[0]


def test_reports_do_not_modify_result(torus, torus_minimizer_128):
    res, _ = torus_minimizer_128
    before = (res.support.copy(), np.array(res.u, copy=True))
    lagrange_multiplier_estimate(torus, res.grid, res)
    assert np.array_equal(before[0], res.support) and np.array_equal(before[1], res.u)
    assert cell_volumes(torus, res.grid).flags.writeable is False
