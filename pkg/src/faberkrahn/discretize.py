"""Finite-volume Laplace-Beltrami operators and field calculus on chart grids.

The stiffness matrix discretises ``-d_i(g^ij sqrt|g| d_j u)`` in flux form:
every cell face carries a conductance built from ``g^ii sqrt|g|`` at the face
centre, and off-diagonal metrics add a symmetric corner-based 9-point term.
The mass matrix is lumped, ``sqrt|g|(node) h1 h2``.

Dirichlet conditions live on cell faces. A face between a kept and a removed
node (or a truncation edge) is closed with the mirror ghost ``-u``, which
doubles that face's conductance on the kept node's diagonal; the removed
degrees of freedom are then dropped. For a support that is a union of cells
the discrete problem is therefore posed on exactly that union, and its
volume is the sum of the cell volumes.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import Grid, local_order
from .manifold import check_spd


class EmptySupportError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteOperatorPair:
    """Stiffness ``K`` and lumped mass ``M`` on a set of grid nodes.

    ``index`` lists the global flat node of every row. ``edges`` holds the
    face conductances ``(p, q, c)`` between rows and ``ghost`` the Dirichlet
    face terms ``(p, c)`` already folded into the diagonal of ``K``.
    """

    K: sp.csr_matrix
    M: np.ndarray
    index: np.ndarray
    grid: Grid
    chart: object = field(repr=False)
    edges: tuple = field(repr=False, default=())
    ghost: tuple = field(repr=False, default=())
    cross: sp.csr_matrix | None = field(repr=False, default=None)

    @property
    def n(self):
        return self.M.size

    def to_grid(self, values, fill=0.0):
        """Scatter row values back onto the full grid."""
        out = np.full(self.grid.size, fill, dtype=float)
        out[self.index] = values
        return out.reshape(self.grid.shape)

    def from_grid(self, field):
        return np.asarray(field, float).ravel()[self.index]


@functools.lru_cache(maxsize=16)
def cell_volumes(chart, grid):
    """``sqrt|g|`` at every node times the coordinate cell area."""
    X1, X2 = grid.mesh()
    vol = chart.sqrt_det(X1, X2) * grid.cell_area
    vol = np.array(vol, float)
    vol.setflags(write=False)
    return vol


def total_volume(chart, grid):
    return float(cell_volumes(chart, grid).sum())


def volume(chart, grid, support):
    return float(cell_volumes(chart, grid)[np.asarray(support, bool).reshape(grid.shape)].sum())


def assemble_operators(chart, grid):
    """Stiffness/mass pair on the whole chart grid."""
    n1, n2 = grid.shape
    h1, h2 = grid.h
    c1, c2 = grid.coords(0), grid.coords(1)
    X1, X2 = np.meshgrid(c1, c2, indexing="ij")
    check_spd(*chart.metric(X1, X2))
    idx = np.arange(grid.size).reshape(grid.shape)

    ep, eq, ec = [], [], []
    gp, gc = [], []

    # faces normal to axis 0 sit at x1 + h1/2
    a11, _, _ = chart.coefficient(X1 + 0.5 * h1, X2)
    cond = np.asarray(a11) * h2 / h1
    if grid.periodic[0]:
        p, q, c = idx, np.roll(idx, -1, axis=0), cond
    else:
        p, q, c = idx[:-1], idx[1:], cond[:-1]
    ep.append(p.ravel()), eq.append(q.ravel()), ec.append(c.ravel())
    # faces normal to axis 1 sit at x2 + h2/2
    _, _, a22 = chart.coefficient(X1, X2 + 0.5 * h2)
    cond = np.asarray(a22) * h1 / h2
    if grid.periodic[1]:
        p, q, c = idx, np.roll(idx, -1, axis=1), cond
    else:
        p, q, c = idx[:, :-1], idx[:, 1:], cond[:, :-1]
    ep.append(p.ravel()), eq.append(q.ravel()), ec.append(c.ravel())

    # truncation edges: Dirichlet on the edge face
    for ax, kind in enumerate(chart.boundary_kind):
        if kind != "truncation":
            continue
        h_ax = grid.h[ax]
        h_ot = grid.h[1 - ax]
        a, b = grid.domain[ax]
        for edge, sl in ((a, 0), (b, -1)):
            if ax == 0:
                coef = chart.coefficient(np.full(n2, edge), c2)[0]
                nodes = idx[sl, :]
            else:
                coef = chart.coefficient(c1, np.full(n1, edge))[2]
                nodes = idx[:, sl]
            gp.append(nodes.ravel())
            gc.append(2.0 * np.asarray(coef).ravel() * h_ot / h_ax)

    ep = np.concatenate(ep)
    eq = np.concatenate(eq)
    ec = np.concatenate(ec)
    gp = np.concatenate(gp) if gp else np.zeros(0, np.int64)
    gc = np.concatenate(gc) if gc else np.zeros(0)

    K = _edge_matrix(grid.size, ep, eq, ec, gp, gc)
    cross = _cross_matrix(chart, grid)
    if cross is not None:
        K = (K + cross).tocsr()
    M = cell_volumes(chart, grid).ravel().copy()
    return DiscreteOperatorPair(K=K, M=M, index=np.arange(grid.size), grid=grid, chart=chart,
                                edges=(ep, eq, ec), ghost=(gp, gc), cross=cross)


def _edge_matrix(n, ep, eq, ec, gp, gc):
    diag = np.zeros(n)
    np.add.at(diag, ep, ec)
    np.add.at(diag, eq, ec)
    np.add.at(diag, gp, gc)
    rows = np.concatenate([ep, eq, np.arange(n)])
    cols = np.concatenate([eq, ep, np.arange(n)])
    vals = np.concatenate([-ec, -ec, diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _cross_matrix(chart, grid):
    """Symmetric corner stencil for ``2 a12 d1u d2u``; ``None`` for diagonal metrics."""
    n1, n2 = grid.shape
    h1, h2 = grid.h
    c1, c2 = grid.coords(0), grid.coords(1)
    # corners at (x1 + h1/2, x2 + h2/2)
    X1, X2 = np.meshgrid(c1 + 0.5 * h1, c2 + 0.5 * h2, indexing="ij")
    _, a12, _ = chart.coefficient(X1, X2)
    a12 = np.asarray(a12)
    if not np.any(a12):
        return None
    idx = np.arange(grid.size).reshape(grid.shape)
    i_hi = slice(None) if grid.periodic[0] else slice(0, n1 - 1)
    j_hi = slice(None) if grid.periodic[1] else slice(0, n2 - 1)
    n00 = idx[i_hi, j_hi]
    n10 = np.roll(idx, -1, axis=0)[i_hi, j_hi]
    n01 = np.roll(idx, -1, axis=1)[i_hi, j_hi]
    n11 = np.roll(np.roll(idx, -1, axis=0), -1, axis=1)[i_hi, j_hi]
    w = a12[i_hi, j_hi].ravel()
    corners = [n00.ravel(), n10.ravel(), n01.ravel(), n11.ravel()]
    d1 = np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * h1)
    d2 = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * h2)
    local = (np.outer(d1, d2) + np.outer(d2, d1)) * h1 * h2
    rows, cols, vals = [], [], []
    for a in range(4):
        for b in range(4):
            if local[a, b] == 0.0:
                continue
            rows.append(corners[a])
            cols.append(corners[b])
            vals.append(w * local[a, b])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(grid.size, grid.size))


def restrict_to_support(ops, support, order=None):
    """Operators for the Dirichlet problem on the cells of ``support``.

    ``order`` optionally fixes the row order (global flat indices); by default
    rows follow :func:`~faberkrahn.grid.local_order`.
    """
    grid = ops.grid
    mask = np.asarray(support, bool).ravel()
    if mask.size != grid.size:
        raise ValueError("support must be a full-grid indicator")
    if not mask.any():
        raise EmptySupportError("empty support")
    if ops.index.size != grid.size:
        raise ValueError("restrict from the full-grid operator pair")
    S = local_order(grid, mask) if order is None else np.asarray(order, np.int64)
    if mask.all() and order is None:
        S = np.arange(grid.size)
    pos = np.full(grid.size, -1, np.int64)
    pos[S] = np.arange(S.size)

    ep, eq, ec = ops.edges
    gp, gc = ops.ghost
    in_p = mask[ep]
    in_q = mask[eq]
    both = in_p & in_q
    cut = in_p ^ in_q
    cut_node = np.where(in_p, ep, eq)[cut]
    keep_g = mask[gp]
    new_gp = np.concatenate([pos[gp[keep_g]], pos[cut_node]])
    new_gc = np.concatenate([gc[keep_g], 2.0 * ec[cut]])
    new_edges = (pos[ep[both]], pos[eq[both]], ec[both])
    K = _edge_matrix(S.size, *new_edges, new_gp, new_gc)
    cross = None
    if ops.cross is not None:
        cross = ops.cross[S][:, S].tocsr()
        K = (K + cross).tocsr()
    return DiscreteOperatorPair(K=K, M=ops.M[S].copy(), index=S, grid=grid, chart=ops.chart,
                                edges=new_edges, ghost=(new_gp, new_gc), cross=cross)


def node_energy(ops, u):
    """Split of ``u^T K u`` onto rows: each face's energy is shared by its two ends.

    Dirichlet faces charge their whole energy to the kept node. With ``u`` in
    row order the entries sum to ``u^T K u``.
    """
    u = np.asarray(u, float)
    ep, eq, ec = ops.edges
    gp, gc = ops.ghost
    e = np.zeros(ops.n)
    fe = ec * (u[ep] - u[eq]) ** 2
    np.add.at(e, ep, 0.5 * fe)
    np.add.at(e, eq, 0.5 * fe)
    np.add.at(e, gp, gc * u[gp] ** 2)
    if ops.cross is not None:
        e += u * (ops.cross @ u)
    return e


def dirichlet_energy(ops, v):
    """``int |grad v|^2`` of a full-grid field vanishing off its own support."""
    v = np.asarray(v, float).ravel()
    mask = v != 0
    if not mask.any():
        return 0.0
    sub = restrict_to_support(ops, mask)
    w = v[sub.index]
    return float(w @ (sub.K @ w))


def integrate(chart, grid, f):
    """``sum f sqrt|g| h1 h2`` over all nodes."""
    return float(np.sum(np.asarray(f, float).reshape(grid.shape) * cell_volumes(chart, grid)))


def gradient_norm_field(chart, grid, u):
    """``||grad^g u||_g`` at every node from centred differences.

    Non-periodic edges use one-sided differences.
    """
    u = np.asarray(u, float).reshape(grid.shape)
    derivs = []
    for ax in range(2):
        h = grid.h[ax]
        if grid.periodic[ax]:
            d = (np.roll(u, -1, axis=ax) - np.roll(u, 1, axis=ax)) / (2 * h)
        else:
            d = np.gradient(u, h, axis=ax, edge_order=1)
        derivs.append(d)
    from .geodesic import node_metric

    g11, g12, g22 = node_metric(chart, grid)
    det = g11 * g22 - g12 * g12
    d1, d2 = derivs
    sq = (g22 * d1 * d1 - 2 * g12 * d1 * d2 + g11 * d2 * d2) / det
    return np.sqrt(np.maximum(sq, 0.0))


def metric_spacing(chart, grid, x0):
    """Largest metric length of a grid step at ``x0``."""
    g11, g12, g22 = (float(np.asarray(c)) for c in chart.metric(*chart.wrap(x0)))
    h1, h2 = grid.h
    return max(h1 * np.sqrt(g11), h2 * np.sqrt(g22))


def shell_weights(dist, r, width):
    """Indicator of ``|d - r| <= width/2``, the annulus used as a proxy for the circle."""
    d = np.asarray(dist)
    return (np.abs(d - r) <= 0.5 * width).astype(float)


def sphere_average(chart, grid, u, x0, r, dist=None):
    """Mean of ``u`` over the geodesic circle of radius ``r`` about ``x0``.

    Uses the annulus ``r +- h/2`` (``h`` the metric grid step at ``x0``).
    """
    from .geodesic import geodesic_distance_field

    h = metric_spacing(chart, grid, x0)
    if r < 2 * h:
        raise ValueError(f"radius {r} below two grid steps ({2 * h})")
    if dist is None:
        dist = geodesic_distance_field(chart, x0, grid, max_distance=r + h).values
    w = shell_weights(dist, r, h) * cell_volumes(chart, grid)
    tot = w.sum()
    if tot <= 0:
        raise ValueError("annulus contains no nodes")
    return float(np.sum(w * np.asarray(u, float).reshape(grid.shape)) / tot)


def export_field_csv(path, chart, grid, values, name="value"):
    """Write ``i, j, x1, x2, value`` rows for every node."""
    X1, X2 = grid.mesh()
    vals = np.asarray(values, float).reshape(grid.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x1", "x2", name])
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                w.writerow([i, j, repr(float(X1[i, j])), repr(float(X2[i, j])), repr(float(vals[i, j]))])
