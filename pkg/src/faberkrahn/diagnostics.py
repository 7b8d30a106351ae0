"""Free-boundary diagnostics on a converged shape.

Every quantity here is read off a :class:`~faberkrahn.shapeopt.ShapeResult`
(or a support/field pair) without modifying it: boundary extraction, the
multiplier ``Lambda`` (the squared boundary slope), Weiss energies, volume
densities, nondegeneracy and growth constants, and the perimeter.

The discrete free boundary sits on the cut faces between support and
complement (the Dirichlet data vanish at face midpoints), so ball centres
for the Weiss and density profiles are face midpoints.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .discretize import (assemble_operators, cell_volumes, metric_spacing, node_energy,
                         restrict_to_support, sphere_average)
from .geodesic import geodesic_distance_field, node_metric
from .grid import local_order


# cells around a ball centre seeded with chord lengths before marching
SOURCE_CELLS = 8


class DiagnosticsError(ValueError):
    pass


# -- boundary --------------------------------------------------------------------


def _neighbor_masks(grid, mask, outside_value=False):
    """Yield ``(axis, step, neighbour_of_mask)`` for the four lattice directions."""
    for ax in range(2):
        for step in (1, -1):
            nb = np.roll(mask, -step, axis=ax)  # nb[i] = mask[i + step]
            if not grid.periodic[ax]:
                edge = [slice(None), slice(None)]
                edge[ax] = -1 if step == 1 else 0
                nb[tuple(edge)] = outside_value
            yield ax, step, nb


def _check_support(grid, support):
    S = np.asarray(support, bool).reshape(grid.shape)
    if not S.any():
        raise DiagnosticsError("empty support")
    if S.all():
        raise DiagnosticsError("support covers the whole grid; there is no boundary")
    return S


def boundary_nodes(grid, support):
    """Support nodes with at least one lattice neighbour outside the support.

    Returned as flat indices in translation-covariant order.
    """
    S = _check_support(grid, support)
    out = np.zeros(grid.shape, bool)
    for _, _, nb in _neighbor_masks(grid, S, outside_value=True):
        out |= S & ~nb
    if not out.any():
        raise DiagnosticsError("support has no boundary inside the grid")
    return local_order(grid, out)


@dataclass(frozen=True)
class BoundaryFaces:
    """Cut faces between the support and its complement."""

    points: np.ndarray  # (k, 2) chart coordinates of face midpoints
    inside: np.ndarray  # flat index of the support node
    outside: np.ndarray  # flat index of the complement node
    axis: np.ndarray

    def __len__(self):
        return int(self.inside.size)

    def select(self, n):
        """``n`` faces spread evenly along the stored order."""
        k = len(self)
        if n >= k:
            return np.arange(k)
        return np.unique(np.linspace(0, k - 1, n).round().astype(int))


def boundary_faces(chart, grid, support):
    S = _check_support(grid, support)
    rank = np.full(grid.size, grid.size, np.int64)
    order = local_order(grid, S)
    rank[order] = np.arange(order.size)
    pts, ins, outs, axes = [], [], [], []
    coords = (grid.coords(0), grid.coords(1))
    for ax, step, nb in _neighbor_masks(grid, S, outside_value=True):
        cut = S & ~nb
        ii, jj = np.nonzero(cut)
        if ii.size == 0:
            continue
        k_in = ii * grid.shape[1] + jj
        io, jo = (ii + step, jj) if ax == 0 else (ii, jj + step)
        k_out = grid.index(io, jo)
        p = np.stack([coords[0][ii], coords[1][jj]], axis=1).astype(float)
        p[:, ax] += 0.5 * step * grid.h[ax]
        pts.append(p)
        ins.append(k_in)
        outs.append(k_out)
        axes.append(np.full(ii.size, ax))
    pts = np.concatenate(pts)
    ins = np.concatenate(ins)
    outs = np.concatenate(outs)
    axes = np.concatenate(axes)
    o = np.lexsort((outs, rank[ins]))
    # wrap face midpoints back into the chart rectangle
    for ax in range(2):
        if grid.periodic[ax]:
            a, b = chart.domain[ax]
            pts[:, ax] = a + np.mod(pts[:, ax] - a, b - a)
    return BoundaryFaces(points=pts[o], inside=ins[o], outside=outs[o], axis=axes[o])


def boundary_points(chart, grid, support):
    """Face midpoints of the discrete free boundary, ``(k, 2)``."""
    return boundary_faces(chart, grid, support).points


# -- multiplier ------------------------------------------------------------------


@dataclass(frozen=True)
class MultiplierEstimate:
    Lambda: float
    band_width: float
    samples: np.ndarray = field(repr=False)
    dispersion: float = 0.0
    nodes: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {"Lambda": self.Lambda, "band_width": self.band_width,
                "dispersion": self.dispersion, "n_samples": int(self.samples.size)}


def reflected_field(grid, support, u):
    """``u`` extended to the outer ring by odd reflection through the cut faces.

    Each outer node takes minus the mean of its support neighbours, the value
    that puts the zero of the linear interpolant on the face midpoint.
    """
    S = np.asarray(support, bool).reshape(grid.shape)
    u = np.where(S, np.asarray(u, float).reshape(grid.shape), 0.0)
    total = np.zeros(grid.shape)
    count = np.zeros(grid.shape)
    for ax in range(2):
        for step in (1, -1):
            sh = np.roll(u, step, axis=ax)
            cs = np.roll(S, step, axis=ax).astype(float)
            if not grid.periodic[ax]:
                edge = [slice(None), slice(None)]
                edge[ax] = 0 if step == 1 else -1
                sh[tuple(edge)] = 0.0
                cs[tuple(edge)] = 0.0
            total += sh
            count += cs
    ring = ~S & (count > 0)
    v = u.copy()
    v[ring] = -total[ring] / count[ring]
    return v


def centered_gradient_sq(chart, grid, v):
    """``g^ij d_i v d_j v`` from centred differences (one-sided at truncation rows)."""
    g11, g12, g22 = node_metric(chart, grid)
    det = g11 * g22 - g12 * g12
    d = []
    for ax in range(2):
        h = grid.h[ax]
        if grid.periodic[ax]:
            d.append((np.roll(v, -1, axis=ax) - np.roll(v, 1, axis=ax)) / (2 * h))
        else:
            d.append(np.gradient(v, h, axis=ax, edge_order=1))
    return (g22 * d[0] ** 2 - 2 * g12 * d[0] * d[1] + g11 * d[1] ** 2) / det


def multiplier_from_field(chart, grid, support, u, band_width=None):
    """Boundary-band estimate of ``Lambda = |grad u|^2`` on the free boundary.

    ``|grad u|^2`` of the reflected field is sampled on the boundary layer of
    the support; each boundary node's sample is the mean over boundary nodes
    within ``band_width`` (metric length, default three grid steps).
    ``Lambda`` is the mean of these samples and ``dispersion`` their
    coefficient of variation.
    """
    S = _check_support(grid, support)
    nodes = boundary_nodes(grid, S)
    if band_width is None:
        band_width = 3.0 * metric_spacing(chart, grid, grid.node_point(nodes[0]))
    v = reflected_field(grid, S, u)
    G2 = centered_gradient_sq(chart, grid, v)
    raw = G2.ravel()[nodes]
    # tangential band mean: neighbours within band_width along the boundary layer
    samples = np.empty(nodes.size)
    layer = np.zeros(grid.size, bool)
    layer[nodes] = True
    pos = np.full(grid.size, -1, np.int64)
    pos[nodes] = np.arange(nodes.size)
    for n_i, k in enumerate(nodes):
        dist = geodesic_distance_field(chart, grid.node_point(k), grid,
                                       max_distance=band_width + 1e-12).values.ravel()
        sel = layer & (dist <= band_width)
        samples[n_i] = raw[pos[sel]].mean()
    if samples.size == 0:
        raise DiagnosticsError("empty boundary band")
    lam = float(samples.mean())
    disp = float(samples.std() / lam) if lam > 0 else math.inf
    return MultiplierEstimate(Lambda=lam, band_width=float(band_width), samples=samples,
                              dispersion=disp, nodes=nodes)


def lagrange_multiplier_estimate(chart, grid, result, band_width=None):
    """:func:`multiplier_from_field` on a shape result."""
    return multiplier_from_field(chart, grid, result.support, result.u, band_width)


# -- ball integrals --------------------------------------------------------------


def ball_weights(dist, r, width):
    """Smoothed ball indicator: 1 inside ``r - w``, 0 outside ``r + w``, C^1 in between.

    It is the integral in ``r`` of :func:`shell_density`, so ball and circle
    integrals stay consistent (``d/dr`` of one is the other).
    """
    s = (np.asarray(dist, float) - r) / width
    w = np.where(s <= 0.0, 1.0 - 0.5 * (s + 1.0) ** 2, 0.5 * (1.0 - s) ** 2)
    return np.where(s <= -1.0, 1.0, np.where(s >= 1.0, 0.0, w))


def shell_density(dist, r, width):
    """Hat kernel of half-width ``w`` around the circle ``d = r`` (unit mass across it)."""
    s = np.abs(np.asarray(dist, float) - r) / width
    return np.clip(1.0 - s, 0.0, None) / width


def default_radii(chart, grid, x0, n=10, r0=None):
    """Geometric radii from three grid steps to ``r0``.

    ``r0`` defaults to a quarter of the injectivity scale of the chart, capped
    by the distance to a truncation edge.
    """
    h = metric_spacing(chart, grid, x0)
    if r0 is None:
        r0 = 0.25 * injectivity_scale(chart)
        r0 = min(r0, truncation_distance(chart, x0))
    lo = 3.0 * h
    if r0 <= lo:
        raise DiagnosticsError(f"outer radius {r0} below three grid steps {lo}")
    return np.geomspace(lo, r0, n)


def injectivity_scale(chart):
    c = chart.scale
    if chart.kind == "flat_torus":
        return 0.5 * c * min(chart.params["L1"], chart.params["L2"])
    if chart.kind == "sphere":
        return math.pi * c * chart.params["R"]
    if chart.kind == "catenoid":
        return math.pi * c * chart.params["neck"]
    # custom charts: half the shortest metric side length at the centre
    mid = tuple(0.5 * (a + b) for a, b in chart.domain)
    g11, _, g22 = (float(np.asarray(v)) for v in chart.metric(*mid))
    return 0.5 * min(chart.lengths[0] * math.sqrt(g11), chart.lengths[1] * math.sqrt(g22))


def truncation_distance(chart, x0):
    d = math.inf
    for ax in range(2):
        if chart.boundary_kind[ax] != "truncation":
            continue
        a, b = chart.domain[ax]
        g = chart.metric(*x0)
        gaa = float(np.asarray(g[0] if ax == 0 else g[2]))
        d = min(d, math.sqrt(gaa) * min(x0[ax] - a, b - x0[ax]))
    return d


@dataclass
class _BallData:
    radii: np.ndarray
    energy: np.ndarray  # int_B |grad u|^2
    inside_volume: np.ndarray  # vol(B n support), support as a box-smoothed volume fraction
    ball_volume: np.ndarray
    boundary_mass: np.ndarray  # int_dB u^2
    width: float


def _ball_data(chart, grid, x0, radii, support, u, energy_per_node):
    vol = cell_volumes(chart, grid).ravel()
    h = metric_spacing(chart, grid, x0)
    radii = np.asarray(radii, float)
    if radii.min() < 3.0 * h - 1e-12:
        raise DiagnosticsError(f"radius {radii.min()} below three grid steps ({3 * h})")
    if radii.max() + h > truncation_distance(chart, x0):
        raise DiagnosticsError("ball exits the chart through a truncation edge")
    dist = geodesic_distance_field(chart, x0, grid, max_distance=radii.max() + 2 * h,
                                   init_cells=SOURCE_CELLS)
    d = dist.values.ravel()
    S = _smoothed_indicator(grid, np.asarray(support, bool).reshape(grid.shape)).ravel()
    u = np.asarray(u, float).ravel()
    out = _BallData(radii=radii, energy=np.empty(radii.size),
                    inside_volume=np.empty(radii.size), ball_volume=np.empty(radii.size),
                    boundary_mass=np.empty(radii.size), width=h)
    for n, r in enumerate(radii):
        w = ball_weights(d, r, h)
        s = shell_density(d, r, h)
        out.energy[n] = float(np.sum(w * energy_per_node))
        out.inside_volume[n] = float(np.sum(w * vol * S))
        out.ball_volume[n] = float(np.sum(w * vol))
        out.boundary_mass[n] = float(np.sum(s * vol * u * u))
    return out


def _energy_per_node(chart, grid, support, u, ops=None):
    if ops is None:
        ops = assemble_operators(chart, grid)
    sub = restrict_to_support(ops, np.asarray(support, bool).ravel())
    e = np.zeros(grid.size)
    e[sub.index] = node_energy(sub, np.asarray(u, float).ravel()[sub.index])
    return e


def _extrapolate_r2(radii, values, k=3):
    """Value at ``r = 0`` of the straight line through ``(r^2, value)`` at the ``k`` smallest radii."""
    o = np.argsort(radii)[:k]
    A = np.stack([np.ones(o.size), radii[o] ** 2], axis=1)
    coef = np.linalg.lstsq(A, values[o], rcond=None)[0]
    return float(coef[0])


# -- Weiss -----------------------------------------------------------------------


@dataclass(frozen=True)
class WeissProfile:
    center: tuple
    radii: np.ndarray
    phi: np.ndarray
    C: float
    phi0: float
    Lambda: float
    quadrature_error: np.ndarray = field(repr=False, default=None)
    energy: np.ndarray = field(repr=False, default=None)
    boundary_term: np.ndarray = field(repr=False, default=None)

    def monotone(self, C=None):
        """``phi + (C/2) r^2`` nondecreasing, allowing each step the quadrature error."""
        C = self.C if C is None else C
        adj = self.phi + 0.5 * C * self.radii**2
        tol = self.quadrature_error[1:] + self.quadrature_error[:-1]
        # rounding slack so the fitted C passes its own check
        tol = tol + 1e-12 * np.abs(adj).max()
        return bool(np.all(np.diff(adj) >= -tol))

    @property
    def energy0(self):
        """``lim (1/r^2) int_B |grad u|^2`` extrapolated like ``phi0``."""
        return _extrapolate_r2(self.radii, self.energy / self.radii**2)

    def to_rows(self):
        return [{"x0": list(self.center), "r": float(r), "phi": float(p), "Lambda": self.Lambda}
                for r, p in zip(self.radii, self.phi)]


def fit_drift_constant(radii, phi, error=None):
    """Smallest ``C >= 0`` with ``phi + (C/2) r^2`` nondecreasing over the samples.

    With ``error`` (per-sample quadrature bounds) a step may drop by the sum of
    the two bounds before it needs drift, matching :meth:`WeissProfile.monotone`.
    """
    radii = np.asarray(radii, float)
    phi = np.asarray(phi, float)
    o = np.argsort(radii)
    r2 = radii[o] ** 2
    drop = phi[o][:-1] - phi[o][1:]
    if error is not None:
        err = np.asarray(error, float)[o]
        drop = drop - (err[1:] + err[:-1])
    need = 2.0 * drop / np.diff(r2)
    return float(max(0.0, need.max())) if need.size else 0.0


def weiss_profile(chart, grid, result, x0, radii=None, Lambda=None, ops=None, energy=None):
    """Weiss energy ``phi(r)`` about the boundary point ``x0``.

    ``phi(r) = r^-2 int_{B_r} (|grad u|^2 + Lambda 1_{u>0}) - r^-3 int_{dB_r} u^2``.
    ``result`` may be a shape result or any object with ``support`` and ``u``.
    """
    support, u = result.support, result.u
    if Lambda is None:
        Lambda = lagrange_multiplier_estimate(chart, grid, result).Lambda
    if radii is None:
        radii = default_radii(chart, grid, x0)
    if energy is None:
        energy = _energy_per_node(chart, grid, support, u, ops)
    b = _ball_data(chart, grid, x0, radii, support, u, energy)
    r = b.radii
    bulk = (b.energy + Lambda * b.inside_volume) / r**2
    bnd = b.boundary_mass / r**3
    phi = bulk - bnd
    # per-sample error bound: one shell of width h moved across the ball edge
    qerr = (np.abs(bulk) + np.abs(bnd)) * (b.width / r) ** 2 + 1e-12 * np.abs(phi)
    C = fit_drift_constant(r, phi, qerr)
    return WeissProfile(center=tuple(float(c) for c in x0), radii=r, phi=phi, C=C,
                        phi0=_extrapolate_r2(r, phi), Lambda=float(Lambda),
                        quadrature_error=qerr, energy=b.energy, boundary_term=bnd)


# -- density ---------------------------------------------------------------------


@dataclass(frozen=True)
class DensityReport:
    center: tuple
    radii: np.ndarray
    theta: np.ndarray
    theta0: float
    delta: float
    within_bounds: np.ndarray = field(repr=False, default=None)

    @property
    def ok(self):
        return bool(np.all(self.within_bounds))

    def to_rows(self):
        return [{"x0": list(self.center), "r": float(r), "theta": float(t)}
                for r, t in zip(self.radii, self.theta)]


def density_profile(chart, grid, support, x0, radii=None, delta=0.1):
    """Volume fraction ``theta_r = Vol(support n B_r) / Vol(B_r)`` about ``x0``."""
    if radii is None:
        radii = default_radii(chart, grid, x0)
    support = np.asarray(support, bool)
    b = _ball_data(chart, grid, x0, radii, support, np.zeros(grid.size), np.zeros(grid.size))
    theta = np.clip(b.inside_volume / b.ball_volume, 0.0, 1.0)
    return DensityReport(center=tuple(float(c) for c in x0), radii=b.radii, theta=theta,
                         theta0=_extrapolate_r2(b.radii, theta), delta=float(delta),
                         within_bounds=(theta >= delta) & (theta <= 1 - delta))


def density_formula_check(profile, report):
    """``|theta(x0) - phi(0+) / (Lambda pi)|`` for matching profiles."""
    if np.linalg.norm(np.subtract(profile.center, report.center)) > 1e-12:
        raise DiagnosticsError("Weiss and density profiles are centred at different points")
    return abs(report.theta0 - profile.phi0 / (profile.Lambda * math.pi))


def weiss_implied_multiplier(profile, report):
    """``Lambda`` from the bulk energy of the Weiss functional.

    At a regular point the Dirichlet part of ``phi`` tends to ``Lambda`` times
    the volume part, so ``Lambda ~ energy0 / (pi theta0)``.
    """
    return profile.energy0 / (math.pi * report.theta0)


# -- nondegeneracy / growth ------------------------------------------------------


@dataclass(frozen=True)
class GrowthReport:
    """Scaled circle averages ``(1/r) mean_{dB_r} u`` at sampled centres and radii."""

    centers: np.ndarray
    radii: np.ndarray
    values: np.ndarray  # (n_centers, n_radii)
    constant: float
    kind: str
    mask: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {"kind": self.kind, "constant": self.constant,
                "n_centers": int(len(self.centers)), "radii": [float(r) for r in self.radii]}


def _scaled_averages(chart, grid, u, centers, radii):
    vals = np.empty((len(centers), len(radii)))
    for a, x0 in enumerate(centers):
        dist = geodesic_distance_field(chart, tuple(x0), grid, init_cells=SOURCE_CELLS,
                                       max_distance=max(radii) + 8 * max(grid.h)).values
        for b, r in enumerate(radii):
            vals[a, b] = sphere_average(chart, grid, u, tuple(x0), r, dist=dist) / r
    return vals


def nondegeneracy_check(chart, grid, result, radii=None, n_points=24):
    """Empirical nondegeneracy constant at boundary points.

    Per boundary point the minimum over radii of ``(1/r) mean_{dB_r} u``;
    ``constant`` is the minimum over points.
    """
    faces = boundary_faces(chart, grid, result.support)
    pts = faces.points[faces.select(n_points)]
    if radii is None:
        radii = default_radii(chart, grid, tuple(pts[0]), n=6)
    vals = _scaled_averages(chart, grid, result.u, pts, radii)
    return GrowthReport(centers=pts, radii=np.asarray(radii), values=vals,
                        constant=float(vals.min(axis=1).min()), kind="nondegeneracy")


def growth_bound_check(chart, grid, result, radii=None, n_points=24, n_interior=24):
    """Empirical growth constant: largest ``(1/r) mean_{dB_r} u`` over balls leaving the support.

    Centres are boundary points and a spread of support nodes; balls that lie
    entirely inside the support are skipped (the implication only constrains
    balls that meet the zero set).
    """
    S = np.asarray(result.support, bool).reshape(grid.shape)
    u = np.asarray(result.u, float).reshape(grid.shape)
    faces = boundary_faces(chart, grid, S)
    pts = list(faces.points[faces.select(n_points)])
    inner = local_order(grid, S)
    if inner.size:
        pick = np.unique(np.linspace(0, inner.size - 1, n_interior).round().astype(int))
        pts += [grid.node_point(k) for k in inner[pick]]
    pts = np.asarray(pts, float)
    if radii is None:
        radii = default_radii(chart, grid, tuple(pts[0]), n=6)
    radii = np.asarray(radii, float)
    vals = np.zeros((len(pts), radii.size))
    mask = np.zeros_like(vals, bool)
    for a, x0 in enumerate(pts):
        dist = geodesic_distance_field(chart, tuple(x0), grid, init_cells=SOURCE_CELLS,
                                       max_distance=radii.max() + 8 * max(grid.h)).values
        for b, r in enumerate(radii):
            h = metric_spacing(chart, grid, tuple(x0))
            ball = dist <= r + 0.5 * h
            if np.all(S[ball]):
                continue
            mask[a, b] = True
            vals[a, b] = sphere_average(chart, grid, u, tuple(x0), r, dist=dist) / r
    const = float(vals[mask].max()) if mask.any() else 0.0
    return GrowthReport(centers=pts, radii=radii, values=vals, constant=const, kind="growth",
                        mask=mask)


# -- perimeter -------------------------------------------------------------------

# marching-squares edge pairs per corner pattern (bits: c00, c10, c11, c01)
_EDGES = {
    1: [(0, 3)], 2: [(0, 1)], 3: [(1, 3)], 4: [(1, 2)], 5: [(0, 1), (2, 3)], 6: [(0, 2)],
    7: [(2, 3)], 8: [(2, 3)], 9: [(0, 2)], 10: [(0, 3), (1, 2)], 11: [(1, 2)], 12: [(1, 3)],
    13: [(0, 1)], 14: [(0, 3)],
}


def _smoothed_indicator(grid, S):
    """3x3 box average of the indicator (wrapping periodic axes, clamping the others)."""
    f = S.astype(float)
    for ax in range(2):
        f = ndimage.uniform_filter1d(f, 3, axis=ax, mode="wrap" if grid.periodic[ax] else "nearest")
    return f


def contour_segments(chart, grid, f, level=0.0):
    """Marching-squares segments of ``{f = level}`` with linear interpolation.

    Returns ``(p, q)``, two ``(k, 2)`` arrays of segment end points in chart
    coordinates (not wrapped; a segment never crosses a periodic seam).
    """
    f = np.asarray(f, float).reshape(grid.shape) - level
    n1, n2 = grid.shape
    c0, c1 = grid.coords(0), grid.coords(1)
    h1, h2 = grid.h
    i_max = n1 if grid.periodic[0] else n1 - 1
    j_max = n2 if grid.periodic[1] else n2 - 1
    I, J = np.meshgrid(np.arange(i_max), np.arange(j_max), indexing="ij")
    I1 = (I + 1) % n1
    J1 = (J + 1) % n2
    v = [f[I, J], f[I1, J], f[I1, J1], f[I, J1]]  # corners in cyclic order
    code = ((v[0] > 0).astype(int) | ((v[1] > 0) << 1) | ((v[2] > 0) << 2) | ((v[3] > 0) << 3))
    corner = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)

    def crossing(e, sel):
        a, b = e, (e + 1) % 4
        fa, fb = v[a][sel], v[b][sel]
        t = fa / (fa - fb)
        return corner[a] + t[:, None] * (corner[b] - corner[a])

    P, Q = [], []
    for cd, pairs in _EDGES.items():
        sel = code == cd
        if not sel.any():
            continue
        base = np.stack([c0[I[sel]], c1[J[sel]]], axis=1)
        for ea, eb in pairs:
            P.append(base + crossing(ea, sel) * (h1, h2))
            Q.append(base + crossing(eb, sel) * (h1, h2))
    if not P:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(P), np.concatenate(Q)


def _wrap_points(chart, pts):
    pts = np.array(pts, float)
    for ax in range(2):
        if chart.periodic[ax]:
            a, b = chart.domain[ax]
            pts[:, ax] = a + np.mod(pts[:, ax] - a, b - a)
    return pts


def segment_lengths(chart, p, q):
    mid = _wrap_points(chart, 0.5 * (p + q))
    g11, g12, g22 = (np.broadcast_to(np.asarray(c, float), mid.shape[:1])
                     for c in chart.metric(mid[:, 0], mid[:, 1]))
    dx, dy = (q - p).T
    return np.sqrt(g11 * dx * dx + 2 * g12 * dx * dy + g22 * dy * dy)


def perimeter_estimate(chart, grid, support):
    """Metric length of the free boundary.

    The 0.5 level line of the box-smoothed indicator is traced by marching
    squares and each segment is measured with the metric at its midpoint.
    Interpolating the smoothed indicator, instead of joining face midpoints,
    avoids the bias of staircase and 45-degree chains towards longer curves.
    """
    S = np.asarray(support, bool).reshape(grid.shape)
    if not S.any():
        raise DiagnosticsError("empty support")
    p, q = contour_segments(chart, grid, _smoothed_indicator(grid, S), 0.5)
    return float(segment_lengths(chart, p, q).sum())


def free_boundary_points(chart, grid, support, n=None):
    """Points on the smoothed free boundary, in translation-covariant order.

    The 0.5 line of the box-smoothed indicator is traced by marching squares;
    segment midpoints are returned, optionally thinned to ``n`` points spread
    along that order. These lie within a fraction of a cell of the smooth
    curve that the lattice support approximates, unlike face midpoints,
    which zigzag by half a cell along slanted boundaries.
    """
    S = _check_support(grid, support)
    p, q = contour_segments(chart, grid, _smoothed_indicator(grid, S), 0.5)
    if len(p) == 0:
        raise DiagnosticsError("no boundary contour found")
    pts = _wrap_points(chart, 0.5 * (p + q))
    near = np.array([grid.nearest_node(x) for x in pts], np.int64)
    rank = np.full(grid.size, grid.size, np.int64)
    order = local_order(grid, dilate_mask(grid, S))
    rank[order] = np.arange(order.size)
    o = np.lexsort((pts[:, 1], pts[:, 0], rank[near]))
    pts = pts[o]
    if n is not None and n < len(pts):
        pts = pts[np.unique(np.linspace(0, len(pts) - 1, n).round().astype(int))]
    return pts


def dilate_mask(grid, S):
    out = S.copy()
    for _, _, nb in _neighbor_masks(grid, S, outside_value=False):
        out |= nb
    return out


# -- export ----------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def report_to_json(report, path=None):
    data = report.to_dict() if hasattr(report, "to_dict") else asdict(report)
    text = json.dumps(_jsonable(data), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


DIAGNOSTIC_COLUMNS = ("x0", "r", "phi", "theta", "Lambda")


def diagnostics_rows(profiles, reports):
    """Flat rows ``(x0, r, phi, theta, Lambda)`` for matching Weiss/density profiles."""
    rows = []
    for prof, rep in zip(profiles, reports):
        x0 = ";".join(repr(float(c)) for c in prof.center)
        for r, phi, theta in zip(prof.radii, prof.phi, rep.theta):
            rows.append({"x0": x0, "r": repr(float(r)), "phi": repr(float(phi)),
                         "theta": repr(float(theta)), "Lambda": repr(float(prof.Lambda))})
    return rows


def write_diagnostics_csv(path, profiles, reports):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
        w.writeheader()
        for row in diagnostics_rows(profiles, reports):
            w.writerow(row)
