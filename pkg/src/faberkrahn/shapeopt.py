"""Volume-constrained minimisation of the first Dirichlet eigenvalue.

The minimiser is searched as a fixed point of "solve, then threshold the
ground state at volume m". A support can only lose cells when its own
eigenfunction is thresholded, so each step thresholds the ground state of the
support dilated by ``grow`` cell rings instead: its superlevel sets advance
where the boundary slope is large and retreat where it is small. A step is
kept only if it lowers the eigenvalue; otherwise it is blended with the
current eigenfunction and retried with a smaller weight.
"""

from __future__ import annotations

import concurrent.futures as cf
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .config import thread_cap
from .discretize import (assemble_operators, cell_volumes, dirichlet_energy, integrate,
                         node_energy, restrict_to_support, total_volume)
from .eigensolve import ConvergenceError, smallest_eigenpair
from .geodesic import (_check_truncation, distance_to_complement, geodesic_ball_of_volume,
                       geodesic_distance_field, node_metric)
from .grid import local_order, support_anchor
from .manifold import ChartError

log = logging.getLogger(__name__)

TRUNCATION_MARGIN = 5


@dataclass(frozen=True)
class ShapeOptions:
    tol: float = 1e-4
    eig_tol: float = 1e-6
    max_iter: int = 400
    damping: float = 0.5
    max_backtracks: int = 4
    grow: int = 2
    swap_width: int = 6
    smoothing: tuple = (4.0, 16.0, 64.0, 256.0)
    block_swaps: int = 4
    kicks: tuple = (16.0, 64.0, 256.0)
    seed: int = 0
    init: object = "ball"
    center: tuple | None = None
    inner: str = "direct"

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if not isinstance(self.init, str):
            out["init"] = "array"
        if self.center is not None:
            out["center"] = list(self.center)
        return out


@dataclass(frozen=True, eq=False)
class ShapeResult:
    """Converged (or best) support with its ground state and iteration trace."""

    support: np.ndarray
    volume: float
    lambda1: float
    u: np.ndarray
    trace: tuple
    m: float
    lambda_target: float
    converged: bool
    iterations: int
    chart: object = field(repr=False, default=None)
    grid: object = field(repr=False, default=None)
    multiplier: float | None = None

    def with_multiplier(self, value):
        return replace(self, multiplier=float(value))


# -- support helpers -------------------------------------------------------------


def dilate(grid, mask, rings=1):
    """Grow ``mask`` by ``rings`` 4-neighbour rings, wrapping periodic axes."""
    out = np.asarray(mask, bool).reshape(grid.shape).copy()
    for _ in range(rings):
        nxt = out.copy()
        for ax in range(2):
            for s in (1, -1):
                r = np.roll(out, s, axis=ax)
                if not grid.periodic[ax]:
                    edge = [slice(None), slice(None)]
                    edge[ax] = 0 if s == 1 else -1
                    r[tuple(edge)] = False
                nxt |= r
        out = nxt
    return out


def erode(grid, mask, rings=1):
    return ~dilate(grid, ~np.asarray(mask, bool).reshape(grid.shape), rings)


def volume_threshold(chart, grid, u, m, order=None):
    """Superlevel set of ``u`` holding volume ``m`` to within one cell.

    Nodes are ranked by decreasing ``u``; equal values are ranked by their
    position in ``order`` (flat node indices, default: node index). The
    returned set is the prefix of that ranking whose volume is closest to ``m``.
    """
    u = np.asarray(u, float).ravel()
    vol = cell_volumes(chart, grid).ravel()
    total = vol.sum()
    if not 0 < m < total:
        raise ValueError(f"volume {m} outside (0, {total})")
    if not np.any(u > 0):
        raise ValueError("threshold field is identically zero")
    rank = np.empty(grid.size, np.int64)
    if order is None:
        rank[:] = np.arange(grid.size)
    else:
        order = np.asarray(order, np.int64)
        rank[:] = grid.size
        rank[order] = np.arange(order.size)
        rest = np.setdiff1d(np.arange(grid.size), order, assume_unique=True)
        rank[rest] = order.size + np.arange(rest.size)
    idx = np.lexsort((rank, -u))
    cum = np.cumsum(vol[idx])
    k = int(np.argmin(np.abs(cum - m)))
    mask = np.zeros(grid.size, bool)
    mask[idx[: k + 1]] = True
    return mask.reshape(grid.shape)


def domain_center(chart):
    return tuple(0.5 * (a + b) for a, b in chart.domain)


def random_blob(chart, grid, m, seed=0, center=None):
    """Irregular blob of volume ``m``: smoothed noise on top of a broad bump."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.shape)
    vol = cell_volumes(chart, grid)
    R = math.sqrt(m / math.pi)
    sig = [max(1.0, 0.35 * R / (grid.h[ax] * math.sqrt(float(np.mean(vol)) / grid.cell_area)))
           for ax in range(2)]
    modes = ["wrap" if p else "nearest" for p in grid.periodic]
    smooth = noise
    for ax in range(2):
        smooth = ndimage.gaussian_filter1d(smooth, sig[ax], axis=ax, mode=modes[ax])
    smooth /= np.abs(smooth).max()
    c = center or domain_center(chart)
    d = geodesic_distance_field(chart, c, grid, max_distance=4 * R).values
    bump = np.exp(-((np.where(np.isfinite(d), d, 1e3) / (1.6 * R)) ** 2))
    return volume_threshold(chart, grid, bump + 0.6 * smooth + 1.0, m)


def initial_support(chart, grid, m, opts):
    init = opts.init
    center = opts.center or domain_center(chart)
    if isinstance(init, str):
        if init == "ball":
            mask, _ = geodesic_ball_of_volume(chart, grid, center, m, margin=TRUNCATION_MARGIN)
            return mask
        if init == "blob":
            return random_blob(chart, grid, m, seed=opts.seed, center=center)
        raise ValueError(f"unknown init {init!r}")
    mask = np.asarray(init, bool).reshape(grid.shape)
    return mask


def _frechet_cost(chart, grid, x, weights, reach):
    d = geodesic_distance_field(chart, x, grid, max_distance=reach).values.ravel()
    sel = weights > 0
    if not np.all(np.isfinite(d[sel])):
        return np.inf
    return float(np.sum(weights[sel] * d[sel] ** 2))


def metric_barycenter(chart, grid, support, start=None):
    """Node (or pole) minimising ``sum_S vol * d_g(., y)^2`` over the support ``S``.

    The search is a hill climb over 8-neighbour nodes from ``start`` (default:
    the deepest support node); pole points of the chart are tried as well
    whenever the support touches the first or last row next to them.
    """
    S = np.asarray(support, bool).reshape(grid.shape)
    if not S.any():
        raise ValueError("empty support")
    w = (cell_volumes(chart, grid) * S).ravel()
    if start is None:
        depth = distance_to_complement(chart, grid, S)
        k = int(np.argmax(np.where(S, depth, -np.inf)))
    else:
        k = int(grid.nearest_node(start))
    d0 = geodesic_distance_field(chart, grid.node_point(k), grid).values.ravel()
    reach = 3.0 * float(np.max(d0[S.ravel()])) + 4 * max(grid.h)
    cache = {}

    def cost(kk):
        if kk not in cache:
            cache[kk] = _frechet_cost(chart, grid, grid.node_point(kk), w, reach)
        return cache[kk]

    while True:
        i, j = grid.unravel(k)
        nbrs = [int(grid.index(i + a, j + b)) for a in (-1, 0, 1) for b in (-1, 0, 1)]
        nbrs = [q for q in nbrs if q >= 0]
        best = min(nbrs, key=lambda q: (cost(q), q))
        if best == k or cost(best) >= cost(k):
            break
        k = best
    point, value = grid.node_point(k), cost(k)
    for ax in range(2):
        if chart.boundary_kind[ax] != "pole":
            continue
        for edge, row in ((chart.domain[ax][0], 0), (chart.domain[ax][1], grid.shape[ax] - 1)):
            touched = S[row, :].any() if ax == 0 else S[:, row].any()
            if not touched:
                continue
            x = [0.5 * (lo + hi) for lo, hi in chart.domain]
            x[ax] = edge
            c = _frechet_cost(chart, grid, tuple(x), w, reach)
            if c < value:
                point, value = tuple(x), c
    return tuple(float(v) for v in point)


# -- objective -------------------------------------------------------------------


def evaluate_J(chart, grid, w, lambda_target, ops=None):
    """``int |grad w|^2 - lambda_target int w^2`` for a field vanishing off its support."""
    w = np.asarray(w, float).ravel()
    if not np.all(np.isfinite(w)):
        raise ValueError("field has non-finite values")
    if not np.any(w):
        return 0.0
    if ops is None:
        ops = assemble_operators(chart, grid)
    return dirichlet_energy(ops, w) - lambda_target * integrate(chart, grid, w * w)


# -- main loop -------------------------------------------------------------------


def symmetry_axes(chart, grid):
    """Periodic axes along which the node metric is invariant under a one-cell shift."""
    g = node_metric(chart, grid)
    return tuple(ax for ax in range(2)
                 if grid.periodic[ax] and all(np.array_equal(np.roll(c, 1, axis=ax), c) for c in g))


class _LocalSearch:
    """Moves shared by the descent and the kick phase of ``fk_minimize``."""

    def __init__(self, chart, grid, m, opts, ops):
        self.chart, self.grid, self.m, self.opts, self.ops = chart, grid, m, opts, ops
        self.vol = cell_volumes(chart, grid)
        self._smoothers = {}

    def solve(self, mask, guess=None):
        o = self.opts
        return smallest_eigenpair(self.ops, mask, tol=o.eig_tol, seed=o.seed, inner=o.inner,
                                  guess=guess)

    def smooth(self, f, strength):
        # implicit heat step (M + tau K) v = M f; rounds off lattice-scale wiggles
        if strength not in self._smoothers:
            ops = self.ops
            tau = strength * float(self.vol.mean())
            self._smoothers[strength] = spla.splu((sp.diags(ops.M) + tau * ops.K).tocsc())
        v = self._smoothers[strength].solve(self.ops.M * self.ops.from_grid(f))
        return self.ops.to_grid(v)

    def threshold_proposals(self, S, pair, strength):
        """Superlevel sets of the dilated support's ground state, blended with the current one."""
        o, grid = self.opts, self.grid
        D = dilate(grid, S, o.grow)
        _check_truncation(self.chart, grid, D, TRUNCATION_MARGIN - o.grow)
        ext = self.solve(D, guess=pair.u).u
        if strength:
            ext = self.smooth(ext, strength)
        ext = ext / ext.max()
        cur = pair.u / pair.u.max()
        order = local_order(grid, D)
        beta = 1.0
        for _ in range(o.max_backtracks + 1):
            yield volume_threshold(self.chart, grid, (1.0 - beta) * cur + beta * ext, self.m,
                                   order=order)
            beta *= o.damping

    def swap_proposals(self, S, pair):
        """Exchange boundary cells, ranked by the first-order change of the eigenvalue."""
        o, grid, vol = self.opts, self.grid, self.vol
        ring_out = dilate(grid, S, 1) & ~S
        _check_truncation(self.chart, grid, S | ring_out, TRUNCATION_MARGIN - 1)
        ring_in = S & ~erode(grid, S, 1)
        ext = self.solve(S | ring_out, guess=pair.u).u.ravel()
        order = local_order(grid, S | ring_out)
        rank = np.empty(grid.size, np.int64)
        rank[order] = np.arange(order.size)
        out_idx = np.flatnonzero(ring_out)
        in_idx = np.flatnonzero(ring_in)
        out_idx = out_idx[np.lexsort((rank[out_idx], -ext[out_idx]))][: o.swap_width]
        in_idx = in_idx[np.lexsort((rank[in_idx], pair.u.ravel()[in_idx]))][: o.swap_width]
        # single swaps in order of combined rank, then block swaps
        pairs = sorted(((a + b, a, b) for a in range(out_idx.size) for b in range(in_idx.size)))
        moves = [([out_idx[a]], [in_idx[b]]) for _, a, b in pairs]
        moves += [(out_idx[:k], in_idx[:k]) for k in range(2, o.block_swaps + 1)]
        vmax = float(vol.max())
        flat = S.ravel()
        for add, rm in moves:
            cand = flat.copy()
            cand[add] = True
            cand[rm] = False
            cand = cand.reshape(grid.shape)
            if abs(float(vol[cand].sum()) - self.m) <= vmax:
                yield cand

    def descend(self, S, pair, trace, it0=0):
        """Greedy descent; returns ``(S, pair, iterations, stalled)``."""
        o, vol = self.opts, self.vol

        def log_move(S_new, new, move, it, accepted):
            trace.append({"iter": it, "lambda": new.lam, "volume": float(vol[S_new].sum()),
                          "change": float(vol[S_new ^ S].sum()), "accepted": accepted,
                          "move": move})

        it = it0
        while it < o.max_iter:
            it += 1
            found = None
            for strength in (0.0,) + tuple(o.smoothing):
                move = f"smooth{strength:g}" if strength else "threshold"
                for S_new in self.threshold_proposals(S, pair, strength):
                    if np.array_equal(S_new, S):
                        break
                    new = self.solve(S_new, guess=pair.u)
                    ok = new.lam < pair.lam * (1.0 - 1e-12)
                    log_move(S_new, new, move, it, ok)
                    if ok:
                        found = (S_new, new)
                        break
                if found:
                    break
            if found is None and o.swap_width > 0:
                for S_new in self.swap_proposals(S, pair):
                    new = self.solve(S_new, guess=pair.u)
                    if new.lam < pair.lam * (1.0 - 1e-12):
                        log_move(S_new, new, "swap", it, True)
                        found = (S_new, new)
                        break
            if found is None:
                return S, pair, it, True
            rel = (pair.lam - found[1].lam) / pair.lam
            change = float(vol[found[0] ^ S].sum())
            S, pair = found
            if rel < o.tol and change < o.tol * self.m:
                return S, pair, it, True
        return S, pair, it, False


def fk_minimize(chart, grid, m, opts=None, ops=None, **kw):
    """Approximate Faber-Krahn minimiser of volume ``m`` on the chart grid.

    A greedy descent over threshold and cell-swap moves is followed by
    kicks: the ground state is heat-smoothed at several strengths,
    re-thresholded, and descended from again. A kick is kept only if it ends
    below the current eigenvalue, so the accepted trace stays monotone.
    """
    opts = replace(opts or ShapeOptions(), **kw)
    total = total_volume(chart, grid)
    if not 0 < m < total:
        raise ValueError(f"volume {m} outside (0, {total})")
    if ops is None:
        ops = assemble_operators(chart, grid)
    search = _LocalSearch(chart, grid, m, opts, ops)
    vol = search.vol

    S = initial_support(chart, grid, m, opts)
    _check_truncation(chart, grid, S, TRUNCATION_MARGIN)
    # work in a frame pinned to the initial support along symmetry axes, so
    # that a lattice shift of the initial support shifts the result exactly
    anchor = support_anchor(grid, S, symmetry_axes(chart, grid))
    S = np.roll(S, (-anchor[0], -anchor[1]), (0, 1))
    pair = search.solve(S)
    trace = [{"iter": 0, "lambda": pair.lam, "volume": float(vol[S].sum()), "change": 0.0,
              "accepted": True, "move": "init"}]
    S, pair, it, converged = search.descend(S, pair, trace)
    improved = converged
    while improved and it < opts.max_iter:
        improved = False
        for kick in ("ball",) + tuple(opts.kicks):
            if kick == "ball":
                center = metric_barycenter(chart, grid, S)
                try:
                    S_kick, _ = geodesic_ball_of_volume(chart, grid, center, m,
                                                        margin=TRUNCATION_MARGIN)
                except ChartError:
                    continue
            else:
                field_ = search.smooth(pair.u, kick)
                S_kick = volume_threshold(chart, grid, field_, m, order=local_order(grid, S))
            if np.array_equal(S_kick, S):
                continue
            try:
                _check_truncation(chart, grid, S_kick, TRUNCATION_MARGIN)
            except ChartError:
                continue
            side = []
            S_new, new, it, conv = search.descend(S_kick, search.solve(S_kick), side, it)
            ok = new.lam < pair.lam * (1.0 - 1e-12)
            trace.append({"iter": it, "lambda": new.lam, "volume": float(vol[S_new].sum()),
                          "change": float(vol[S_new ^ S].sum()), "accepted": ok,
                          "move": f"kick-{kick}"})
            if ok:
                S, pair, converged = S_new, new, conv
                improved = True
                break
    if it >= opts.max_iter:
        converged = False
    log.info("fk_minimize m=%g: lambda=%.8g after %d iterations (converged=%s)",
             m, pair.lam, it, converged)
    S = np.roll(S, anchor, (0, 1))
    u = np.roll(np.asarray(pair.u).reshape(grid.shape), anchor, (0, 1))
    return ShapeResult(support=S, volume=float(vol[S].sum()), lambda1=pair.lam, u=u,
                       trace=tuple(trace), m=float(m), lambda_target=pair.lam,
                       converged=converged, iterations=it, chart=chart, grid=grid)


def accepted_lambdas(result):
    return [t["lambda"] for t in result.trace if t["accepted"]]


def fk_profile(chart, grid, volumes, opts=None, threads=None):
    """Faber-Krahn profile ``m -> FK(m)`` on a list of volumes.

    Returns a list of ``(m, FK(m), ShapeResult)`` in the order given.
    """
    volumes = [float(m) for m in volumes]
    total = total_volume(chart, grid)
    for m in volumes:
        if not 0 < m < total:
            raise ValueError(f"volume {m} outside (0, {total})")
    ops = assemble_operators(chart, grid)
    workers = thread_cap(threads)
    if workers <= 1 or len(volumes) == 1:
        results = [fk_minimize(chart, grid, m, opts, ops=ops) for m in volumes]
    else:
        with cf.ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda m: fk_minimize(chart, grid, m, opts, ops=ops), volumes))
    return [(m, r.lambda1, r) for m, r in zip(volumes, results)]


# -- global penalisation certificate --------------------------------------------


@dataclass(frozen=True)
class PenalizationReport:
    mu_star: float
    candidates_tested: int
    violations: tuple
    fitted_threshold: float
    slacks: tuple = field(repr=False, default=())


def _bump(chart, grid, center, radius):
    d = geodesic_distance_field(chart, center, grid, max_distance=radius + max(grid.h)).values
    b = np.where(d < radius, np.cos(0.5 * math.pi * np.minimum(d / radius, 1.0)) ** 2, 0.0)
    return b


def penalization_candidates(result, n_candidates, seed=0, ops=None):
    """Seeded competitor fields ``v`` for the global penalisation inequality.

    Yields ``(label, v)`` with ``v`` a full-grid nonnegative field.
    """
    chart, grid = result.chart, result.grid
    if ops is None:
        ops = assemble_operators(chart, grid)
    rng = np.random.default_rng(seed)
    u = result.u
    S = result.support
    vol = cell_volumes(chart, grid)
    out = [("u", u)]

    def ground(mask):
        return smallest_eigenpair(ops, mask, tol=1e-9, seed=seed).u

    # dilations and erosions of the support
    for k in (1, 2, 3):
        out.append((f"dilate{k}", ground(dilate(grid, S, k))))
        E = erode(grid, S, k)
        if E.any():
            out.append((f"erode{k}", ground(E)))
    # volume-m balls around lattice translates of the ground-state peak
    peak = int(np.argmax(u))
    pi_, pj = np.unravel_index(peak, grid.shape)
    ball_fields = []
    for _ in range(3):
        di = [int(rng.integers(-3, 4)) if grid.periodic[0] else 0,
              int(rng.integers(-3, 4)) if grid.periodic[1] else 0]
        if grid.periodic[0]:
            di[0] += int(rng.integers(1, grid.shape[0] - 1))
        if grid.periodic[1]:
            di[1] += int(rng.integers(1, grid.shape[1] - 1))
        k = int(grid.index(pi_ + di[0], pj + di[1]))
        try:
            mask, _ = geodesic_ball_of_volume(chart, grid, grid.node_point(k), result.m,
                                              margin=TRUNCATION_MARGIN)
        except ValueError:
            continue
        ball_fields.append(ground(mask))
    out += [(f"ball{i}", f) for i, f in enumerate(ball_fields)]
    # boundary-hugging indices for bumps
    ring = dilate(grid, S, 2) & ~erode(grid, S, 2)
    ring_nodes = np.flatnonzero(ring)
    h = max(grid.h)
    base = list(out)
    while len(out) < n_candidates:
        kind = int(rng.integers(0, 4))
        if kind == 0:
            # rescaled ground state
            label, f = base[int(rng.integers(0, len(base)))]
            s = float(rng.uniform(0.5, 1.5))
            out.append((f"{label}*{s:.3f}", s * f))
        elif kind == 1:
            # bump added near the free boundary
            k = int(rng.choice(ring_nodes))
            rad = float(rng.uniform(2, 6)) * h * math.sqrt(float(vol.ravel()[k]) / grid.cell_area)
            amp = float(rng.uniform(0.05, 1.0)) * float(u.max())
            b = _bump(chart, grid, grid.node_point(k), rad)
            v = u + amp * b
            v = v / math.sqrt(integrate(chart, grid, v * v))
            out.append((f"bump@{k}", v))
        elif kind == 2:
            # ground state with a random boundary cell removed or added
            mask = S.copy().ravel()
            flips = rng.choice(ring_nodes, size=int(rng.integers(1, 6)), replace=False)
            mask[flips] = ~mask[flips]
            if mask.any():
                out.append((f"flip{len(flips)}", ground(mask)))
        else:
            # ground-state perturbation supported on the current support
            noise = rng.standard_normal(grid.shape) * S
            v = np.abs(u + 0.05 * float(u.max()) * ndimage.gaussian_filter(noise, 1.0) * S)
            v = v / math.sqrt(integrate(chart, grid, v * v))
            out.append(("noise", v))
    return out[:n_candidates]


def _penalty_terms(result, v, ops):
    chart, grid = result.chart, result.grid
    Eu = dirichlet_energy(ops, result.u)
    Ev = dirichlet_energy(ops, v)
    l2 = integrate(chart, grid, v * v)
    Vv = float(cell_volumes(chart, grid)[np.asarray(v).reshape(grid.shape) != 0].sum())
    rhs0 = Ev + result.lambda_target * max(0.0, 1.0 - l2)
    excess = max(0.0, Vv - result.m)
    return Eu, rhs0, excess


def penalization_certificate(result, mu_star=None, n_candidates=200, seed=0, ops=None,
                             rtol=1e-9):
    """Check ``E(u) <= E(v) + lambda(m)[1 - |v|^2]^+ + mu*[Vol(v) - m]^+`` on seeded competitors.

    ``mu_star=None`` uses the fitted threshold: the smallest ``mu`` for which
    every candidate satisfies the inequality.
    """
    if ops is None:
        ops = assemble_operators(result.chart, result.grid)
    cands = penalization_candidates(result, n_candidates, seed=seed, ops=ops)
    terms = []
    need = 0.0
    for label, v in cands:
        Eu, rhs0, excess = _penalty_terms(result, v, ops)
        slack0 = rhs0 - Eu + rtol * abs(Eu)
        if slack0 < 0 and excess > 0:
            need = max(need, -slack0 / excess)
        terms.append((label, Eu, rhs0, excess))
    mu = need if mu_star is None else float(mu_star)
    violations = []
    slacks = []
    for i, (label, Eu, rhs0, excess) in enumerate(terms):
        rhs = rhs0 + mu * excess
        slack = rhs - Eu
        slacks.append(slack)
        if slack < -rtol * abs(Eu):
            violations.append((i, label, Eu, rhs))
    return PenalizationReport(mu_star=mu, candidates_tested=len(terms),
                              violations=tuple(violations), fitted_threshold=need,
                              slacks=tuple(slacks))


def rayleigh_energy_gap(result, ops=None):
    """``|lambda1 - int |grad u|^2|`` for the stored normalised ground state."""
    if ops is None:
        ops = assemble_operators(result.chart, result.grid)
    return abs(result.lambda1 - dirichlet_energy(ops, result.u))


__all__ = [
    "ShapeOptions", "ShapeResult", "fk_minimize", "fk_profile", "volume_threshold",
    "evaluate_J", "penalization_certificate", "PenalizationReport", "dilate", "erode",
    "node_energy", "restrict_to_support", "ConvergenceError",
]
