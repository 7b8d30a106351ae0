"""Config-driven runs: single solves, Faber-Krahn profiles and the catenoid drift.

Every run writes ``manifest.json`` plus flat CSV tables into its own
directory. The manifest is serialised with sorted keys and ``repr`` floats,
so repeated runs with the same config and thread count produce identical
bytes apart from the ``timestamp`` field (which is pinned too when
``SOURCE_DATE_EPOCH`` is set). Wall-clock timings go to ``timings.json``.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import datetime as dt
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, thread_cap
from .diagnostics import (DiagnosticsError, _energy_per_node, _jsonable, default_radii,
                          density_formula_check, density_profile, diagnostics_rows, free_boundary_points,
                          lagrange_multiplier_estimate, weiss_profile)
from .discretize import assemble_operators, cell_volumes, export_field_csv
from .geodesic import geodesic_ball_of_volume, geodesic_distance_field
from .geopolar import converged_ball_eigenvalue
from .grid import Grid
from .manifold import builtin_catenoid, chart_from_dict
from .oracles import disk_eigenvalue
from .shapeopt import (TRUNCATION_MARGIN, ShapeOptions, accepted_lambdas, fk_minimize,
                       penalization_certificate, rayleigh_energy_gap)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PROFILE_COLUMNS = ("m", "FK", "iterations", "converged")
DRIFT_COLUMNS = ("t", "r", "lambda", "gap")
DIAGNOSTIC_COLUMNS = ("x0", "r", "phi", "theta", "Lambda")

# acceptance thresholds for the invariant checks
CONSISTENCY_RTOL = 1e-3
MULTIPLIER_DISPERSION = 0.15
DENSITY_GAP_FLOOR = 0.45
DENSITY_RESIDUAL = 0.1
DRIFT_RATIO = 0.2
DRIFT_RADIUS_RTOL = 0.01


class ManifestError(FileNotFoundError):
    pass


@dataclass
class RunOutcome:
    """What a runner wrote and whether its checks passed."""

    run_dir: Path
    manifest: dict
    checks: dict
    converged: bool

    @property
    def ok(self):
        return all(self.checks.values())


# -- serialisation ---------------------------------------------------------------


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch
            else dt.datetime.now(dt.timezone.utc))
    return when.replace(microsecond=0).isoformat()


def manifest_bytes(manifest):
    return (json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n").encode()


def _write_manifest(run_dir, manifest):
    path = Path(run_dir) / MANIFEST
    path.write_bytes(manifest_bytes(manifest))
    return path


def _write_table(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})
    return path


def _fmt(x):
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


# -- catenoid drift --------------------------------------------------------------


@dataclass(frozen=True)
class DriftResult:
    """Geodesic balls of volume ``m`` sliding out along a catenoid end."""

    neck: float
    m: float
    positions: tuple
    radii: tuple
    lambdas: tuple
    floor: float
    gaps: tuple
    spreads: tuple
    volumes: tuple
    grid_volumes: tuple
    grid_radii: tuple
    cell_volumes: tuple
    grid_shape: tuple
    truncation: float
    extra: dict = field(default_factory=dict)

    @property
    def resolution(self):
        """Largest eigenvalue uncertainty over all positions."""
        return 2.0 * max(self.spreads)

    def decreasing(self):
        d = np.diff(self.lambdas)
        return bool(np.all(d < -self.resolution))

    def gaps_positive(self):
        return bool(np.all(np.asarray(self.gaps) > self.resolution))

    def gap_ratio(self):
        return self.gaps[-1] / self.gaps[0]

    def volumes_ok(self):
        return all(abs(v - self.m) <= c for v, c in zip(self.grid_volumes, self.cell_volumes))

    def decay_exponent(self):
        """Slope of ``log gap`` against ``log t``."""
        t = np.log(np.abs(self.positions))
        g = np.log(np.asarray(self.gaps))
        return float(np.polyfit(t, g, 1)[0])

    def checks(self):
        R = math.sqrt(self.m / math.pi)
        return {
            "drift_decreasing": self.decreasing(),
            "drift_gaps_positive": self.gaps_positive(),
            "drift_gap_ratio": self.gap_ratio() <= DRIFT_RATIO,
            "drift_volumes": self.volumes_ok(),
            "drift_far_radius": abs(self.radii[-1] - R) <= DRIFT_RADIUS_RTOL * R,
        }

    def rows(self):
        return [{"t": t, "r": r, "lambda": lam, "gap": g}
                for t, r, lam, g in zip(self.positions, self.radii, self.lambdas, self.gaps)]

    def to_dict(self):
        return {
            "neck": self.neck, "m": self.m, "truncation": self.truncation,
            "grid": list(self.grid_shape), "floor": self.floor,
            "rows": self.rows(),
            "spreads": list(self.spreads), "volumes": list(self.volumes),
            "grid_volumes": list(self.grid_volumes), "grid_radii": list(self.grid_radii),
            "cell_volumes": list(self.cell_volumes),
            "decay_exponent": self.decay_exponent(), "gap_ratio": self.gap_ratio(),
        }


def _drift_position(chart, grid, t, m, levels):
    x0 = (math.pi, float(t))
    eig, spread = converged_ball_eigenvalue(chart, x0, m, levels=levels)
    # the same ball on the chart grid: fits with the margin, holds m up to a cell
    reach = 2.0 * eig.radius + 4 * max(grid.h)
    dist = geodesic_distance_field(chart, x0, grid, max_distance=reach)
    mask, r_grid = geodesic_ball_of_volume(chart, grid, x0, m, margin=TRUNCATION_MARGIN,
                                           dist=dist)
    vol = cell_volumes(chart, grid)
    return eig, spread, float(vol[mask].sum()), r_grid, float(vol[mask].max())


def run_catenoid_drift(neck, m, positions, grid=(1024, 512), T=60.0, threads=None,
                       levels=((21, 16), (31, 24), (41, 32))):
    """First Dirichlet eigenvalue of the volume-``m`` geodesic ball at each ``t``.

    Eigenvalues come from the spectral geodesic-polar solver, whose error is
    far below the gaps being measured; the chart grid is used to confirm
    that each ball fits inside ``|t| < T`` with a margin of
    ``TRUNCATION_MARGIN`` cells and holds volume ``m`` up to one cell.
    Raises :class:`~faberkrahn.geodesic.BallTruncationError` otherwise.
    """
    positions = tuple(float(t) for t in positions)
    if not positions:
        raise ValueError("no drift positions")
    if any(abs(t) >= T for t in positions):
        raise ValueError(f"positions must satisfy |t| < T = {T}")
    chart = builtin_catenoid(neck, T)
    n1, n2 = grid
    g = Grid.for_chart(chart, n1, n2)
    order = np.argsort(np.abs(positions), kind="stable")
    positions = tuple(positions[i] for i in order)

    def work(t):
        return _drift_position(chart, g, t, m, levels)

    workers = thread_cap(threads)
    if workers > 1 and len(positions) > 1:
        with cf.ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(work, positions))
    else:
        out = [work(t) for t in positions]
    floor = disk_eigenvalue(m)
    lams = tuple(o[0].lam for o in out)
    return DriftResult(
        neck=float(neck), m=float(m), positions=positions,
        radii=tuple(o[0].radius for o in out), lambdas=lams, floor=floor,
        gaps=tuple(lam - floor for lam in lams), spreads=tuple(o[1] for o in out),
        volumes=tuple(o[0].volume for o in out), grid_volumes=tuple(o[2] for o in out),
        grid_radii=tuple(o[3] for o in out), cell_volumes=tuple(o[4] for o in out),
        grid_shape=(n1, n2), truncation=float(T),
    )


def write_drift_run(result, out_dir, timings=None):
    """Manifest and ``drift.csv`` for a drift result; returns a :class:`RunOutcome`."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    checks = result.checks()
    manifest = {
        "schema": 1, "kind": "drift", "version": __version__, "timestamp": _timestamp(),
        "threads": thread_cap(), "drift": result.to_dict(), "checks": checks,
        "files": ["drift.csv"],
    }
    _write_table(run_dir / "drift.csv", DRIFT_COLUMNS,
                 [{k: _fmt(v) for k, v in row.items()} for row in result.rows()])
    _write_manifest(run_dir, manifest)
    if timings is not None:
        (run_dir / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return RunOutcome(run_dir=run_dir, manifest=manifest, checks=checks, converged=True)


# -- solve / profile -------------------------------------------------------------


def shape_options(cfg):
    kw = dict(cfg.solver)
    for key in ("smoothing", "kicks", "center"):
        if kw.get(key) is not None:
            kw[key] = tuple(kw[key])
    return ShapeOptions(**kw)


def _result_summary(result, ops):
    vol = cell_volumes(result.chart, result.grid)
    cell = float(vol.max())
    gap = rayleigh_energy_gap(result, ops)
    lams = accepted_lambdas(result)
    return {
        "m": result.m, "lambda1": result.lambda1, "volume": result.volume,
        "iterations": result.iterations, "converged": result.converged,
        "cell_volume": cell, "energy_gap": gap, "disk_floor": disk_eigenvalue(result.m),
        "checks": {
            "saturation": abs(result.volume - result.m) <= cell,
            "consistency": gap <= CONSISTENCY_RTOL * result.lambda1,
            "monotone_trace": bool(np.all(np.diff(lams) <= 0)),
        },
    }


def run_diagnostics(chart, grid, result, cfg, ops=None):
    """Multiplier, Weiss and density suites on one converged result.

    Returns ``(summary, rows)``; ``rows`` follow ``DIAGNOSTIC_COLUMNS``.
    """
    dcfg = cfg.diagnostics
    est = lagrange_multiplier_estimate(chart, grid, result)
    Lam = est.Lambda
    pts = free_boundary_points(chart, grid, result.support, n=dcfg.n_points)
    profiles, reports, residuals = [], [], []
    energy = _energy_per_node(chart, grid, result.support, result.u, ops)
    for x0 in pts:
        x0 = tuple(float(c) for c in x0)
        pol = dcfg.radii
        radii = default_radii(chart, grid, x0, n=pol.n, r0=pol.r0)
        wp = weiss_profile(chart, grid, result, x0, radii=radii, Lambda=Lam, ops=ops,
                           energy=energy)
        dr = density_profile(chart, grid, result.support, x0, radii=radii,
                             delta=dcfg.density_delta)
        profiles.append(wp)
        reports.append(dr)
        residuals.append(density_formula_check(wp, dr))
    theta0 = np.array([r.theta0 for r in reports])
    summary = {
        "multiplier": est.to_dict(),
        "n_points": len(pts),
        "weiss_C": [p.C for p in profiles],
        "theta0": theta0.tolist(),
        "density_residual": residuals,
        "checks": {
            "multiplier_positive": Lam > 0,
            "multiplier_dispersion": est.dispersion < MULTIPLIER_DISPERSION,
            "weiss_monotone": all(p.monotone() and math.isfinite(p.C) for p in profiles),
            "density_bounds": all(r.ok for r in reports),
            "density_gap": bool(np.all(theta0 >= DENSITY_GAP_FLOOR)),
            "density_formula": bool(np.all(np.asarray(residuals) <= DENSITY_RESIDUAL)),
        },
    }
    if dcfg.penalization:
        pen = penalization_certificate(result, n_candidates=dcfg.n_candidates,
                                       seed=int(cfg.solver.get("seed", 0)), ops=ops)
        summary["penalization"] = {"mu_star": pen.mu_star,
                                   "candidates": pen.candidates_tested,
                                   "violations": len(pen.violations)}
        summary["checks"]["penalization"] = len(pen.violations) == 0
    rows = [{k: _fmt(v) for k, v in row.items()} for row in diagnostics_rows(profiles, reports)]
    return summary, rows


def run_config(config, mode=None, out_dir=None, threads=None):
    """Execute a config (path or :class:`RunConfig`) and write its run directory.

    ``mode`` is ``"solve"`` or ``"profile"``; by default it is ``"profile"``
    when the config lists ``volumes`` and ``"solve"`` otherwise.
    """
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    if mode is None:
        mode = "profile" if cfg.volumes is not None else "solve"
    if mode not in ("solve", "profile"):
        raise ValueError(f"unknown run mode {mode!r}")
    run_dir = Path(out_dir or cfg.output)
    run_dir.mkdir(parents=True, exist_ok=True)
    chart = chart_from_dict(cfg.chart)
    grid = Grid.for_chart(chart, *cfg.grid)
    opts = shape_options(cfg)
    workers = thread_cap(threads)
    volumes = cfg.volume_list()

    t0 = time.perf_counter()
    ops = assemble_operators(chart, grid)
    if workers > 1 and len(volumes) > 1:
        with cf.ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda m: fk_minimize(chart, grid, m, opts, ops=ops), volumes))
    else:
        results = [fk_minimize(chart, grid, m, opts, ops=ops) for m in volumes]
    timings = {"solve_seconds": time.perf_counter() - t0}

    files = ["fk_profile.csv"]
    summaries = []
    checks = {}
    converged = all(r.converged for r in results)
    for i, res in enumerate(results):
        s = _result_summary(res, ops)
        for name, ok in s["checks"].items():
            checks[f"{name}[{i}]"] = ok
        if cfg.diagnostics.export_fields:
            for tag, values in (("u", res.u), ("support", res.support.astype(float))):
                name = f"{tag}_{i}.csv"
                export_field_csv(run_dir / name, chart, grid, values, name=tag)
                files.append(name)
        summaries.append(s)
    _write_table(run_dir / "fk_profile.csv", PROFILE_COLUMNS,
                 [{"m": _fmt(s["m"]), "FK": _fmt(s["lambda1"]), "iterations": s["iterations"],
                   "converged": _fmt(s["converged"])} for s in summaries])

    manifest = {
        "schema": 1, "kind": mode, "version": __version__, "timestamp": _timestamp(),
        "threads": workers, "config": cfg.to_dict(), "chart": chart.to_dict(),
        "grid": grid.to_dict(), "options": opts.to_dict(), "results": summaries,
    }
    if cfg.diagnostics.enabled:
        t1 = time.perf_counter()
        diag = []
        rows = []
        for i, res in enumerate(results):
            try:
                summary, r = run_diagnostics(chart, grid, res, cfg, ops)
            except DiagnosticsError as exc:
                summary, r = {"error": str(exc), "checks": {"diagnostics": False}}, []
            for name, ok in summary["checks"].items():
                checks[f"{name}[{i}]"] = ok
            diag.append(summary)
            rows.extend(r)
        manifest["diagnostics"] = {"results": diag, "rows": rows}
        _write_table(run_dir / "diagnostics.csv", DIAGNOSTIC_COLUMNS, rows)
        files.append("diagnostics.csv")
        timings["diagnostics_seconds"] = time.perf_counter() - t1
    manifest["checks"] = checks
    manifest["converged"] = converged
    manifest["files"] = files
    _write_manifest(run_dir, manifest)
    (run_dir / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return RunOutcome(run_dir=run_dir, manifest=manifest, checks=checks, converged=converged)


# -- export ----------------------------------------------------------------------


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.is_file():
        raise ManifestError(f"no manifest found in {run_dir}")
    return json.loads(path.read_text())


def export_tables(manifest):
    """Flat tables ``{name: (columns, rows)}`` held by a manifest."""
    tables = {}
    if "results" in manifest:
        tables["fk_profile"] = (PROFILE_COLUMNS, [
            {"m": _fmt(float(s["m"])), "FK": _fmt(float(s["lambda1"])),
             "iterations": s["iterations"], "converged": _fmt(bool(s["converged"]))}
            for s in manifest["results"]])
    if "drift" in manifest:
        tables["drift"] = (DRIFT_COLUMNS, [{k: _fmt(float(v)) for k, v in row.items()}
                                           for row in manifest["drift"]["rows"]])
    if "diagnostics" in manifest:
        tables["diagnostics"] = (DIAGNOSTIC_COLUMNS, manifest["diagnostics"]["rows"])
    return tables


def export_results(run_dir, fmt="csv"):
    """Write the run's flat tables as ``<name>.csv`` or ``<name>.json``; returns the paths."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown export format {fmt!r}")
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    paths = []
    for name, (columns, rows) in export_tables(manifest).items():
        path = run_dir / f"{name}.{fmt}"
        if fmt == "csv":
            _write_table(path, columns, rows)
        else:
            data = [{k: row[k] for k in columns} for row in rows]
            path.write_text(json.dumps(data, indent=2) + "\n")
        paths.append(path)
    return paths
