"""Two-dimensional Riemannian manifolds described by a single rectangular chart.

A chart carries the metric coefficients ``g_ij(x)`` as a vectorised function of
the chart coordinates, the per-axis boundary behaviour and enough metadata to be
written to and read back from JSON.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .grid import Grid

BOUNDARY_KINDS = ("periodic", "truncation", "pole")

# sin(theta) floor on the sphere; keeps g finite when a pole is evaluated directly
_SIN_FLOOR = 1e-12


class ChartError(ValueError):
    """Invalid chart parameters or query outside the chart."""


class NonSPDMetricError(ChartError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class MetricTensor:
    """Metric at one point: ``g``, its inverse and the area density."""

    g: np.ndarray
    g_inv: np.ndarray
    sqrt_det: float


@dataclass(frozen=True, eq=False)
class MetricChart:
    """Rectangle ``[a1, b1] x [a2, b2]`` with a metric field.

    ``components(x1, x2)`` returns the broadcast arrays ``(g11, g12, g22)``.
    ``scale`` multiplies the whole metric (``g -> scale**2 g``).
    """

    name: str
    domain: tuple
    periodic: tuple
    boundary_kind: tuple
    components: Callable = field(repr=False)
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    scale: float = 1.0
    samples: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        dom = tuple((float(a), float(b)) for a, b in self.domain)
        if len(dom) != 2 or any(b <= a for a, b in dom):
            raise ChartError(f"degenerate chart domain {self.domain!r}")
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        kinds = tuple(self.boundary_kind)
        for k, p in zip(kinds, self.periodic):
            if k not in BOUNDARY_KINDS:
                raise ChartError(f"unknown boundary kind {k!r}")
            if (k == "periodic") != p:
                raise ChartError("boundary_kind 'periodic' must match the periodic flag")
        object.__setattr__(self, "boundary_kind", kinds)
        if not self.scale > 0:
            raise ChartError("metric scale must be positive")

    # -- metric evaluation -------------------------------------------------
    def metric(self, x1, x2):
        g11, g12, g22 = self.components(np.asarray(x1, float), np.asarray(x2, float))
        s = self.scale**2
        shape = np.broadcast(np.asarray(x1), np.asarray(x2)).shape
        return (
            np.broadcast_to(g11 * s, shape),
            np.broadcast_to(g12 * s, shape),
            np.broadcast_to(g22 * s, shape),
        )

    def sqrt_det(self, x1, x2):
        g11, g12, g22 = self.metric(x1, x2)
        return np.sqrt(g11 * g22 - g12 * g12)

    def coefficient(self, x1, x2):
        """Diffusion tensor ``g^{ij} sqrt|g|`` as ``(a11, a12, a22)``."""
        g11, g12, g22 = self.metric(x1, x2)
        sd = np.sqrt(g11 * g22 - g12 * g12)
        return g22 / sd, -g12 / sd, g11 / sd

    @property
    def lengths(self):
        return tuple(b - a for a, b in self.domain)

    def wrap(self, x):
        """Map a point into the domain along periodic axes; raise if outside otherwise."""
        out = []
        for xi, (a, b), per in zip(x, self.domain, self.periodic):
            xi = float(xi)
            if per:
                xi = a + (xi - a) % (b - a)
            elif not (a - 1e-12 * (b - a) <= xi <= b + 1e-12 * (b - a)):
                raise ChartError(f"point {tuple(x)} outside chart domain {self.domain}")
            out.append(xi)
        return tuple(out)

    def wrap_many(self, x1, x2):
        """Vectorised :meth:`wrap` for coordinate arrays; non-periodic axes are clipped."""
        out = []
        for xi, (a, b), per in zip((x1, x2), self.domain, self.periodic):
            xi = np.asarray(xi, float)
            out.append(a + np.mod(xi - a, b - a) if per else np.clip(xi, a, b))
        return tuple(out)

    def scaled(self, c):
        """Same chart with metric ``c**2 g``."""
        return replace(self, scale=self.scale * float(c))

    def window(self, domain, name=None):
        """Sub-rectangle of the chart; axes no longer covering a full period are truncated."""
        dom = tuple((float(a), float(b)) for a, b in domain)
        periodic = []
        kinds = []
        for (a, b), (a0, b0), per, kind in zip(dom, self.domain, self.periodic, self.boundary_kind):
            full = per and abs((b - a) - (b0 - a0)) < 1e-12 * (b0 - a0)
            if not per and (a < a0 - 1e-12 or b > b0 + 1e-12):
                raise ChartError("window leaves the chart domain")
            periodic.append(full)
            if full:
                kinds.append("periodic")
            elif kind == "pole" and (abs(a - a0) < 1e-12 or abs(b - b0) < 1e-12):
                kinds.append("pole")
            else:
                kinds.append("truncation")
        params = dict(self.params)
        params.setdefault("base_domain", [list(d) for d in self.domain])
        params.setdefault("base_periodic", list(self.periodic))
        params.setdefault("base_boundary_kind", list(self.boundary_kind))
        params["window"] = [list(d) for d in dom]
        return replace(
            self,
            name=name or f"{self.name}-window",
            domain=dom,
            periodic=tuple(periodic),
            boundary_kind=tuple(kinds),
            params=params,
        )

    # -- serialisation -------------------------------------------------------
    def to_dict(self):
        out = {
            "name": self.name,
            "kind": self.kind,
            "domain": [list(d) for d in self.domain],
            "periodic": list(self.periodic),
            "boundary_kind": list(self.boundary_kind),
            "params": dict(self.params),
            "scale": self.scale,
        }
        if self.kind == "custom":
            if self.samples is None:
                raise ChartError("custom chart built from a callable cannot be serialised")
            out["samples"] = {
                "shape": list(self.samples["shape"]),
                "g11": list(map(float, np.ravel(self.samples["g11"]))),
                "g12": list(map(float, np.ravel(self.samples["g12"]))),
                "g22": list(map(float, np.ravel(self.samples["g22"]))),
            }
        return out


def chart_from_dict(data):
    """Rebuild a chart from :meth:`MetricChart.to_dict` output (or a hand-written description)."""
    data = dict(data)
    kind = data.get("kind", "custom")
    params = dict(data.get("params", {}))
    window = params.pop("window", None)
    base_domain = params.pop("base_domain", data.get("domain"))
    base_periodic = params.pop("base_periodic", data.get("periodic", (True, True)))
    base_kinds = params.pop("base_boundary_kind", data.get("boundary_kind"))
    if kind == "flat_torus":
        chart = builtin_flat_torus(params["L1"], params["L2"])
    elif kind == "sphere":
        chart = builtin_sphere(params["R"])
    elif kind == "catenoid":
        chart = builtin_catenoid(params["neck"], params["T"])
    elif kind == "custom":
        s = data["samples"]
        shape = tuple(s["shape"])
        samples = tuple(np.asarray(s[k], float).reshape(shape) for k in ("g11", "g12", "g22"))
        chart = builtin_custom(
            base_domain,
            samples=samples,
            periodic=base_periodic,
            boundary_kind=base_kinds,
            name=data.get("name", "custom"),
        )
    else:
        raise ChartError(f"unknown chart kind {kind!r}")
    if "name" in data:
        chart = replace(chart, name=data["name"])
    if window is not None:
        chart = chart.window(window, name=chart.name)
    scale = float(data.get("scale", 1.0))
    if scale != 1.0:
        chart = chart.scaled(scale)
    return chart


# -- built-in charts -----------------------------------------------------------


def _positive(**kw):
    for k, v in kw.items():
        if not (np.isfinite(v) and v > 0):
            raise ChartError(f"{k} must be positive, got {v!r}")


def builtin_flat_torus(L1, L2):
    """Flat torus ``[0, L1] x [0, L2]`` with identity metric."""
    _positive(L1=L1, L2=L2)

    def components(x1, x2):
        one = np.ones(np.broadcast(x1, x2).shape)
        return one, 0.0 * one, one

    return MetricChart(
        name="flat_torus",
        domain=((0.0, L1), (0.0, L2)),
        periodic=(True, True),
        boundary_kind=("periodic", "periodic"),
        components=components,
        kind="flat_torus",
        params={"L1": float(L1), "L2": float(L2)},
    )


def builtin_sphere(R):
    """Round sphere of radius ``R`` in colatitude/longitude ``(theta, phi)``."""
    _positive(R=R)
    R2 = float(R) ** 2

    def components(theta, phi):
        s = np.maximum(np.abs(np.sin(theta)), _SIN_FLOOR)
        shape = np.broadcast(theta, phi).shape
        return np.full(shape, R2), np.zeros(shape), np.broadcast_to(R2 * s * s, shape)

    return MetricChart(
        name="sphere",
        domain=((0.0, math.pi), (0.0, 2 * math.pi)),
        periodic=(False, True),
        boundary_kind=("pole", "periodic"),
        components=components,
        kind="sphere",
        params={"R": float(R)},
    )


def builtin_catenoid(neck, T):
    """Minimal catenoid in arclength coordinates ``(theta, t)``.

    Metric ``(t**2 + neck**2) dtheta**2 + dt**2``, truncated at ``|t| = T``.
    """
    _positive(neck=neck, T=T)
    n2 = float(neck) ** 2

    def components(theta, t):
        shape = np.broadcast(theta, t).shape
        return np.broadcast_to(t * t + n2, shape), np.zeros(shape), np.ones(shape)

    return MetricChart(
        name="catenoid",
        domain=((0.0, 2 * math.pi), (-float(T), float(T))),
        periodic=(True, False),
        boundary_kind=("periodic", "truncation"),
        components=components,
        kind="catenoid",
        params={"neck": float(neck), "T": float(T)},
    )


def builtin_custom(domain, samples=None, expression=None, periodic=(True, True),
                   boundary_kind=None, name="custom"):
    """Chart from sampled metric coefficients or from a callable.

    ``samples`` is a triple ``(g11, g12, g22)`` of ``(n1, n2)`` arrays located at
    the nodes of a :class:`~faberkrahn.grid.Grid` of that shape; values in
    between are bilinearly interpolated (wrapping along periodic axes).
    ``expression(x1, x2)`` must return the same triple.
    """
    periodic = tuple(bool(p) for p in periodic)
    if boundary_kind is None:
        boundary_kind = tuple("periodic" if p else "truncation" for p in periodic)
    if (samples is None) == (expression is None):
        raise ChartError("give exactly one of samples or expression")

    if expression is not None:
        return MetricChart(name=name, domain=domain, periodic=periodic,
                           boundary_kind=boundary_kind, components=expression)

    g11, g12, g22 = (np.asarray(a, float) for a in samples)
    if not (g11.shape == g12.shape == g22.shape and g11.ndim == 2):
        raise ChartError("metric samples must be three arrays of equal 2-D shape")
    check_spd(g11, g12, g22)
    grid = Grid(g11.shape, domain, periodic)

    def interp(arr, x1, x2):
        idx = []
        wts = []
        for ax, x in enumerate((x1, x2)):
            a, _ = grid.domain[ax]
            h = grid.h[ax]
            n = grid.shape[ax]
            off = 0.0 if grid.periodic[ax] else 0.5
            s = (np.asarray(x, float) - a) / h - off
            i0 = np.floor(s).astype(int)
            w = s - i0
            if grid.periodic[ax]:
                i1 = (i0 + 1) % n
                i0 = i0 % n
            else:
                i0c = np.clip(i0, 0, n - 1)
                i1 = np.clip(i0 + 1, 0, n - 1)
                w = np.where(i0 < 0, 0.0, np.where(i0 >= n - 1, 0.0, w))
                i0 = i0c
            idx.append((i0, i1))
            wts.append(w)
        (a0, a1), (b0, b1) = idx
        u, v = wts
        return ((1 - u) * (1 - v) * arr[a0, b0] + u * (1 - v) * arr[a1, b0]
                + (1 - u) * v * arr[a0, b1] + u * v * arr[a1, b1])

    def components(x1, x2):
        return interp(g11, x1, x2), interp(g12, x1, x2), interp(g22, x1, x2)

    return MetricChart(
        name=name,
        domain=domain,
        periodic=periodic,
        boundary_kind=boundary_kind,
        components=components,
        kind="custom",
        samples={"shape": g11.shape, "g11": g11, "g12": g12, "g22": g22},
    )


def check_spd(g11, g12, g22):
    """Raise :class:`NonSPDMetricError` naming the first node where g is not SPD."""
    g11, g12, g22 = np.broadcast_arrays(g11, g12, g22)
    bad = ~((g11 > 0) & (g11 * g22 - g12 * g12 > 0) & np.isfinite(g11 * g22))
    if bad.any():
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonSPDMetricError(f"metric is not positive definite at node {node}", node=node)


def metric_at(chart, x):
    """Metric triple ``(g, g^{-1}, sqrt|g|)`` at a single chart point."""
    x1, x2 = chart.wrap(x)
    g11, g12, g22 = (float(np.asarray(c)) for c in chart.metric(x1, x2))
    g = np.array([[g11, g12], [g12, g22]])
    det = g11 * g22 - g12 * g12
    if not det > 0:
        raise NonSPDMetricError(f"metric degenerate at {x}")
    g_inv = np.array([[g22, -g12], [-g12, g11]]) / det
    return MetricTensor(g=g, g_inv=g_inv, sqrt_det=math.sqrt(det))
