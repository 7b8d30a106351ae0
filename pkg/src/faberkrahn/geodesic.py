"""Geodesic distance fields, geodesic balls and volume-matched balls.

Distances come from a first-order fast-marching scheme on the 8-neighbour
stencil of the chart grid: each trial value is the minimum over one-point
updates and two-point (triangle) updates, the latter solved in closed form
for the metric at the updated node.
"""

from __future__ import annotations

import functools
import heapq
import math
from dataclasses import dataclass

import numba
import numpy as np

from .grid import local_order
from .manifold import ChartError

_DI = np.array([1, 1, 0, -1, -1, -1, 0, 1], dtype=np.int64)
_DJ = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)


class BallTruncationError(ChartError):
    """A geodesic ball reaches a truncation edge of the chart."""


@dataclass(frozen=True)
class DistanceField:
    values: np.ndarray
    source: tuple

    def at(self, grid, x):
        return float(self.values.reshape(grid.shape).flat[grid.nearest_node(x)])


@functools.lru_cache(maxsize=16)
def node_metric(chart, grid):
    """Metric components at the grid nodes, each of shape ``grid.shape``."""
    X1, X2 = grid.mesh()
    g11, g12, g22 = chart.metric(X1, X2)
    return (np.ascontiguousarray(g11, float), np.ascontiguousarray(g12, float),
            np.ascontiguousarray(g22, float))


@numba.njit(cache=True)
def _neighbor(i, j, k, n1, n2, per0, per1):
    a = i + _DI[k]
    b = j + _DJ[k]
    if per0:
        a = a % n1
    elif a < 0 or a >= n1:
        return -1
    if per1:
        b = b % n2
    elif b < 0 or b >= n2:
        return -1
    return a * n2 + b


@numba.njit(cache=True)
def _update_value(q, n1, n2, per0, per1, h1, h2, g11, g12, g22, dist, state):
    i = q // n2
    j = q % n2
    G11 = g11[q]
    G12 = g12[q]
    G22 = g22[q]
    best = dist[q]
    nb = np.empty(8, np.int64)
    for k in range(8):
        nb[k] = _neighbor(i, j, k, n1, n2, per0, per1)
    for k in range(8):
        a = nb[k]
        if a < 0 or state[a] != 2:
            continue
        # vector from neighbour a to q
        ea1 = -_DI[k] * h1
        ea2 = -_DJ[k] * h2
        C = G11 * ea1 * ea1 + 2.0 * G12 * ea1 * ea2 + G22 * ea2 * ea2
        v = dist[a] + math.sqrt(C)
        if v < best:
            best = v
        for kk in (k - 1, k + 1):
            kb = kk % 8
            b = nb[kb]
            if b < 0 or state[b] != 2:
                continue
            eb1 = -_DI[kb] * h1
            eb2 = -_DJ[kb] * h2
            v1 = eb1 - ea1
            v2 = eb2 - ea2
            A = G11 * v1 * v1 + 2.0 * G12 * v1 * v2 + G22 * v2 * v2
            B = G11 * ea1 * v1 + G12 * (ea1 * v2 + ea2 * v1) + G22 * ea2 * v2
            dT = dist[b] - dist[a]
            if A - dT * dT <= 0.0:
                continue
            disc = A * C - B * B
            if disc < 0.0:
                disc = 0.0
            s = (-B - dT * math.sqrt(disc / (A - dT * dT))) / A
            if s <= 0.0 or s >= 1.0:
                continue
            qs = A * s * s + 2.0 * B * s + C
            if qs < 0.0:
                qs = 0.0
            v = dist[a] + s * dT + math.sqrt(qs)
            if v < best:
                best = v
    return best


@numba.njit(cache=True)
def _march(n1, n2, per0, per1, h1, h2, g11, g12, g22, dist, state, max_dist):
    heap = [(0.0, np.int64(0))]
    heap.pop()
    nodes = np.nonzero(state == 2)[0]
    for p in nodes:
        i = p // n2
        j = p % n2
        for k in range(8):
            q = _neighbor(i, j, k, n1, n2, per0, per1)
            if q < 0 or state[q] >= 2:
                continue
            v = _update_value(q, n1, n2, per0, per1, h1, h2, g11, g12, g22, dist, state)
            if v < dist[q]:
                dist[q] = v
                state[q] = 1
                heapq.heappush(heap, (v, np.int64(q)))
    while len(heap) > 0:
        v, p = heapq.heappop(heap)
        if state[p] >= 2 or v > dist[p]:
            continue
        if v > max_dist:
            break
        state[p] = 2
        i = p // n2
        j = p % n2
        for k in range(8):
            q = _neighbor(i, j, k, n1, n2, per0, per1)
            if q < 0 or state[q] >= 2:
                continue
            w = _update_value(q, n1, n2, per0, per1, h1, h2, g11, g12, g22, dist, state)
            if w < dist[q]:
                dist[q] = w
                state[q] = 1
                heapq.heappush(heap, (w, np.int64(q)))
    for p in range(dist.size):
        if state[p] != 2:
            dist[p] = np.inf


def march_from(chart, grid, init_nodes, init_values, max_distance=np.inf):
    """Fast marching from frozen initial values at ``init_nodes``."""
    g11, g12, g22 = node_metric(chart, grid)
    n1, n2 = grid.shape
    h1, h2 = grid.h
    dist = np.full(grid.size, np.inf)
    state = np.zeros(grid.size, np.int8)
    init_nodes = np.asarray(init_nodes, np.int64)
    init_values = np.asarray(init_values, float)
    # keep the smallest value when a node is listed twice
    order = np.argsort(init_values, kind="stable")[::-1]
    dist[init_nodes[order]] = init_values[order]
    state[init_nodes] = 2
    _march(n1, n2, grid.periodic[0], grid.periodic[1], h1, h2,
           g11.ravel(), g12.ravel(), g22.ravel(), dist, state, float(max_distance))
    return dist.reshape(grid.shape)


def _source_init(chart, grid, x0, init_cells=1):
    """Nodes within ``init_cells`` cells of ``x0`` with chord lengths.

    Each chord is measured with the metric at its chart midpoint, which is
    second-order accurate for short distances. Seeding a few cells this way
    removes most of the first-order marching error near the source, where the
    front is most curved.
    """
    x0 = chart.wrap(x0)
    h = grid.h
    # a source on a collapsed (pole) edge is at equal distance from the whole first row
    for ax in range(2):
        if chart.boundary_kind[ax] != "pole":
            continue
        a, b = chart.domain[ax]
        for edge, row in ((a, 0), (b, grid.shape[ax] - 1)):
            if abs(x0[ax] - edge) <= 1e-12 * (b - a):
                c = grid.coords(ax)[row]
                other = grid.coords(1 - ax)
                if ax == 0:
                    mid = chart.metric(0.5 * (edge + c), other)[0]
                    idx = row * grid.shape[1] + np.arange(grid.shape[1])
                else:
                    mid = chart.metric(other, 0.5 * (edge + c))[2]
                    idx = np.arange(grid.shape[0]) * grid.shape[1] + row
                return idx, np.sqrt(mid) * abs(c - edge)
    k = max(1, int(init_cells))
    base = []
    for ax in range(2):
        a, _ = grid.domain[ax]
        off = 0.0 if grid.periodic[ax] else 0.5
        s = int(math.floor((x0[ax] - a) / h[ax] - off))
        base.append(np.arange(s - k, s + k + 2))
    I, J = np.meshgrid(base[0], base[1], indexing="ij")
    flat = grid.index(I, J).ravel()
    keep = flat >= 0
    flat = np.unique(flat[keep])
    ii, jj = np.divmod(flat, grid.shape[1])
    d = [grid.coords(0)[ii] - x0[0], grid.coords(1)[jj] - x0[1]]
    for ax in range(2):
        if grid.periodic[ax]:
            L = chart.lengths[ax]
            d[ax] = (d[ax] + L / 2) % L - L / 2
    near = np.hypot(d[0] / h[0], d[1] / h[1]) <= k * (1 + 1e-9) if k > 1 else (
        (np.abs(d[0]) <= h[0] * (1 + 1e-12)) & (np.abs(d[1]) <= h[1] * (1 + 1e-12)))
    if not near.any():
        raise ChartError(f"no grid node near {x0}")
    d0, d1 = d[0][near], d[1][near]
    flat = flat[near]
    mid = chart.wrap_many(x0[0] + 0.5 * d0, x0[1] + 0.5 * d1)
    g11, g12, g22 = (np.broadcast_to(np.asarray(c, float), d0.shape) for c in chart.metric(*mid))
    vals = np.sqrt(g11 * d0 * d0 + 2 * g12 * d0 * d1 + g22 * d1 * d1)
    return flat.astype(np.int64), vals


def geodesic_distance_field(chart, x0, grid, max_distance=np.inf, init_cells=1):
    """Approximate geodesic distance ``d_g(x, x0)`` at every node.

    ``x0`` may be any chart point; nodes within ``init_cells`` cells are
    initialised with midpoint-metric chord lengths. Nodes farther than
    ``max_distance`` get ``inf``.
    """
    nodes, vals = _source_init(chart, grid, x0, init_cells)
    d = march_from(chart, grid, nodes, vals, max_distance)
    return DistanceField(values=d, source=tuple(chart.wrap(x0)))


def _check_truncation(chart, grid, mask, margin=0):
    """Raise if ``mask`` comes within ``margin`` cells of a truncation edge."""
    mask = np.asarray(mask, bool).reshape(grid.shape)
    for ax in range(2):
        if chart.boundary_kind[ax] != "truncation":
            continue
        n = grid.shape[ax]
        rows = np.any(mask, axis=1 - ax)
        hit = np.nonzero(rows)[0]
        if hit.size and (hit[0] <= margin or hit[-1] >= n - 1 - margin):
            raise BallTruncationError(
                f"support reaches within {margin} cells of the truncation edge on axis {ax}")


def geodesic_ball(chart, grid, x0, r, dist=None):
    """Indicator of ``{d_g(., x0) <= r}``."""
    if not r > 0:
        raise ValueError("ball radius must be positive")
    if dist is None:
        dist = geodesic_distance_field(chart, x0, grid, max_distance=1.5 * r + 2 * max(grid.h))
    mask = np.asarray(dist.values if isinstance(dist, DistanceField) else dist) <= r
    _check_truncation(chart, grid, mask)
    return mask


def geodesic_ball_of_volume(chart, grid, x0, m, margin=0, dist=None):
    """Ball around ``x0`` holding volume ``m`` up to one cell.

    Returns ``(mask, r)``. Nodes are taken in increasing distance (ties in
    translation-covariant order) until the running volume is closest to ``m``;
    ``r`` is the distance of the last node taken.
    """
    from .discretize import cell_volumes

    vol = cell_volumes(chart, grid).ravel()
    total = vol.sum()
    if not 0 < m < total:
        raise ValueError(f"volume {m} outside (0, {total})")
    if dist is None:
        dist = geodesic_distance_field(chart, x0, grid).values
    d = np.asarray(dist.values if isinstance(dist, DistanceField) else dist).ravel()
    finite = np.isfinite(d)
    cand = local_order(grid, finite)
    cand = cand[np.argsort(d[cand], kind="stable")]
    cum = np.cumsum(vol[cand])
    if cum[-1] < m - 0.5 * vol.max():
        raise ValueError("distance field does not reach far enough for the requested volume")
    k = int(np.argmin(np.abs(cum - m)))
    mask = np.zeros(grid.size, bool)
    mask[cand[: k + 1]] = True
    mask = mask.reshape(grid.shape)
    _check_truncation(chart, grid, mask, margin)
    return mask, float(d[cand[k]])


def ball_radius_for_volume(chart, grid, x0, m):
    """Radius of the geodesic ball around ``x0`` of volume ``m``."""
    return geodesic_ball_of_volume(chart, grid, x0, m)[1]


def distance_to_complement(chart, grid, support):
    """Geodesic depth of every support node below the free boundary.

    Cut faces between support and complement carry distance zero; each
    support node next to one starts at the metric half-cell length.
    """
    mask = np.asarray(support, bool).reshape(grid.shape)
    g11, _, g22 = node_metric(chart, grid)
    h1, h2 = grid.h
    nodes = []
    vals = []
    for ax, (h, gaa) in enumerate(((h1, g11), (h2, g22))):
        for shift in (1, -1):
            nb = np.roll(mask, shift, axis=ax)
            if not grid.periodic[ax]:
                edge = [slice(None), slice(None)]
                edge[ax] = 0 if shift == 1 else -1
                if chart.boundary_kind[ax] == "truncation":
                    nb[tuple(edge)] = False
                else:
                    nb[tuple(edge)] = True
            cut = mask & ~nb
            idx = np.flatnonzero(cut)
            nodes.append(idx)
            vals.append(0.5 * h * np.sqrt(gaa.ravel()[idx]))
    nodes = np.concatenate(nodes)
    vals = np.concatenate(vals)
    if nodes.size == 0:
        return np.full(grid.shape, np.inf)
    d = march_from_restricted(chart, grid, nodes, vals, mask)
    return d


def march_from_restricted(chart, grid, nodes, vals, mask):
    """Fast marching confined to ``mask`` (other nodes are never reached)."""
    g11, g12, g22 = node_metric(chart, grid)
    n1, n2 = grid.shape
    h1, h2 = grid.h
    dist = np.full(grid.size, np.inf)
    state = np.zeros(grid.size, np.int8)
    order = np.argsort(vals, kind="stable")[::-1]
    dist[nodes[order]] = vals[order]
    state[nodes] = 2
    blocked = ~np.asarray(mask, bool).ravel()
    # frozen at +inf: never used as a base for updates
    state[blocked] = 3
    _march(n1, n2, grid.periodic[0], grid.periodic[1], h1, h2,
           g11.ravel(), g12.ravel(), g22.ravel(), dist, state, np.inf)
    dist[blocked] = np.inf
    return dist.reshape(grid.shape)
