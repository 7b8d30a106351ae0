"""Uniform tensor grids on a chart rectangle.

Along a periodic axis node ``i`` sits at ``a + i*h`` (``h = L/n``); along any
other axis nodes are cell centres ``a + (i + 1/2)*h``, so that the truncation
or pole edge coincides with a cell face. Either way every node owns the cell
``[x_i - h/2, x_i + h/2]``. Flat indices are row-major: ``k = i*n2 + j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    shape: tuple
    domain: tuple
    periodic: tuple

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 2 or min(shape) < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "domain", tuple((float(a), float(b)) for a, b in self.domain))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))

    @classmethod
    def for_chart(cls, chart, n1, n2=None):
        return cls((n1, n1 if n2 is None else n2), chart.domain, chart.periodic)

    @classmethod
    def with_spacing(cls, chart, h1, h2):
        """Grid on ``chart`` whose spacings are at most ``h1``, ``h2``."""
        n1 = int(np.ceil(chart.lengths[0] / h1 - 1e-9))
        n2 = int(np.ceil(chart.lengths[1] / h2 - 1e-9))
        return cls((n1, n2), chart.domain, chart.periodic)

    @property
    def h(self):
        return tuple((b - a) / n for (a, b), n in zip(self.domain, self.shape))

    @property
    def size(self):
        return self.shape[0] * self.shape[1]

    @property
    def cell_area(self):
        h1, h2 = self.h
        return h1 * h2

    def coords(self, axis):
        a, _ = self.domain[axis]
        n = self.shape[axis]
        off = 0.0 if self.periodic[axis] else 0.5
        return a + (np.arange(n) + off) * self.h[axis]

    def mesh(self):
        return np.meshgrid(self.coords(0), self.coords(1), indexing="ij")

    def index(self, i, j):
        """Flat index of node ``(i, j)``; wraps periodic axes, ``-1`` off the grid."""
        i = np.asarray(i)
        j = np.asarray(j)
        n1, n2 = self.shape
        if self.periodic[0]:
            i = i % n1
        if self.periodic[1]:
            j = j % n2
        ok = (i >= 0) & (i < n1) & (j >= 0) & (j < n2)
        return np.where(ok, i * n2 + j, -1)

    def unravel(self, k):
        return np.unravel_index(k, self.shape)

    def nearest_node(self, x):
        """Flat index of the node closest (in chart coordinates) to point ``x``."""
        ij = []
        for ax in range(2):
            a, _ = self.domain[ax]
            off = 0.0 if self.periodic[ax] else 0.5
            i = int(np.floor((x[ax] - a) / self.h[ax] - off + 0.5))
            n = self.shape[ax]
            i = i % n if self.periodic[ax] else min(max(i, 0), n - 1)
            ij.append(i)
        return int(ij[0] * self.shape[1] + ij[1])

    def node_point(self, k):
        i, j = self.unravel(int(k))
        return float(self.coords(0)[i]), float(self.coords(1)[j])

    def boundary_mask(self):
        """Nodes in the first/last row of a non-periodic axis."""
        mask = np.zeros(self.shape, bool)
        if not self.periodic[0]:
            mask[0, :] = mask[-1, :] = True
        if not self.periodic[1]:
            mask[:, 0] = mask[:, -1] = True
        return mask

    def to_dict(self):
        return {"shape": list(self.shape)}


def shift_field(grid, field, offset):
    """Translate a node field by whole cells along periodic axes."""
    arr = np.asarray(field).reshape(grid.shape)
    for ax, s in enumerate(offset):
        if s and not grid.periodic[ax]:
            raise ValueError("can only shift along periodic axes")
    return np.roll(arr, shift=tuple(offset), axis=(0, 1))


def local_order(grid, support):
    """Flat indices of ``support`` in a translation-covariant order.

    Periodic axes are unwrapped at the start of the widest empty band of the
    support's projection, then nodes are listed lexicographically in the
    unwrapped coordinates. A lattice shift of the support permutes this list
    consistently, which keeps tie-breaking and factorisation orderings
    equivariant.
    """
    mask = np.asarray(support, bool).reshape(grid.shape)
    ii, jj = np.nonzero(mask)
    keys = []
    for ax, idx in enumerate((ii, jj)):
        n = grid.shape[ax]
        if grid.periodic[ax] and idx.size:
            occupied = np.zeros(n, bool)
            occupied[idx] = True
            start = _unwrap_start(occupied)
            keys.append((idx - start) % n)
        else:
            keys.append(idx)
    order = np.lexsort((keys[1], keys[0]))
    return (ii[order] * grid.shape[1] + jj[order]).astype(np.int64)


def support_anchor(grid, support, axes=(0, 1)):
    """Per-axis unwrap start of the support on the periodic ``axes`` (0 elsewhere).

    Rolling a field by minus the anchor gives a copy that does not depend on
    where the support sits on the lattice.
    """
    mask = np.asarray(support, bool).reshape(grid.shape)
    out = [0, 0]
    for ax in axes:
        if grid.periodic[ax] and mask.any():
            out[ax] = _unwrap_start(np.any(mask, axis=1 - ax))
    return tuple(out)


def _unwrap_start(occupied):
    """First occupied position after the longest cyclic run of empty positions."""
    n = occupied.size
    if occupied.all():
        return 0
    empty = ~occupied
    # scan twice around the circle for the longest empty run
    best_len, best_end = -1, 0
    run = 0
    for k in range(2 * n):
        if empty[k % n]:
            run += 1
            if run > best_len and run <= n:
                best_len, best_end = run, k
        else:
            run = 0
    return (best_end + 1) % n
