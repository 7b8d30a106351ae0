"""Run configuration: a versioned JSON schema with strict key checking.

A config file looks like::

    {
      "schema": 1,
      "chart": {"kind": "flat_torus", "params": {"L1": 6.283185307179586, "L2": 6.283185307179586}},
      "grid": [256, 256],
      "m": 0.5,
      "solver": {"tol": 1e-4, "seed": 0, "init": "ball"},
      "diagnostics": {"enabled": true, "n_points": 20, "radii": {"n": 10}},
      "output": "runs/torus"
    }

``volumes`` (a list) replaces ``m`` for profile runs. Unknown keys anywhere
are rejected with the full key path in the message.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
THREADS_ENV = "FK_THREADS"


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` is the offending key path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_SOLVER_KEYS = {
    "tol": float, "eig_tol": float, "max_iter": int, "damping": float,
    "max_backtracks": int, "grow": int, "swap_width": int, "block_swaps": int,
    "seed": int, "init": str, "inner": str, "smoothing": list, "kicks": list,
    "center": list,
}
_RADII_KEYS = {"n": int, "r0": float, "min_cells": float}
_DIAG_KEYS = {"enabled": bool, "n_points": int, "radii": dict, "multiplier": bool,
              "density_delta": float, "penalization": bool, "n_candidates": int,
              "export_fields": bool}
_TOP_KEYS = {"schema": int, "chart": dict, "grid": list, "m": float, "volumes": list,
             "solver": dict, "diagnostics": dict, "output": str, "allow_nonconverged": bool}
_CHART_KEYS = {"kind", "name", "params", "scale", "domain", "periodic", "boundary_kind",
               "samples"}


@dataclass(frozen=True)
class RadiiPolicy:
    n: int = 10
    r0: float | None = None
    min_cells: float = 3.0


@dataclass(frozen=True)
class DiagnosticsConfig:
    enabled: bool = False
    n_points: int = 20
    radii: RadiiPolicy = field(default_factory=RadiiPolicy)
    multiplier: bool = True
    density_delta: float = 0.1
    penalization: bool = False
    n_candidates: int = 200
    export_fields: bool = True


@dataclass(frozen=True)
class RunConfig:
    chart: dict
    grid: tuple
    m: float | None = None
    volumes: tuple | None = None
    solver: dict = field(default_factory=dict)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: str = "run"
    allow_nonconverged: bool = False
    schema: int = SCHEMA_VERSION

    def to_dict(self):
        out = asdict(self)
        out["grid"] = list(self.grid)
        if self.volumes is not None:
            out["volumes"] = list(self.volumes)
        return out

    def volume_list(self):
        if self.volumes is not None:
            return list(self.volumes)
        return [self.m]


def _check_type(path, value, kind):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(path, f"expected {kind.__name__}, got {type(value).__name__}")
    return float(value) if kind is float else value


def _check_keys(path, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, "unknown key")


def _typed(path, data, types):
    _check_keys(path, data, types)
    out = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        out[key] = value if value is None else _check_type(where, value, types[key])
    return out


def parse_config(data):
    """Validate a config mapping and return a :class:`RunConfig`."""
    top = _typed("", data, _TOP_KEYS)
    schema = top.get("schema")
    if schema is None:
        raise ConfigError("schema", "missing schema version")
    if schema != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported schema version {schema}")
    if "chart" not in top:
        raise ConfigError("chart", "missing chart")
    _check_keys("chart", top["chart"], _CHART_KEYS)
    if "kind" not in top["chart"]:
        raise ConfigError("chart.kind", "missing chart kind")

    grid = top.get("grid")
    if grid is None:
        raise ConfigError("grid", "missing grid")
    if len(grid) not in (1, 2):
        raise ConfigError("grid", "expected [n] or [n1, n2]")
    for i, n in enumerate(grid):
        _check_type(f"grid[{i}]", n, int)
        if n < 4:
            raise ConfigError(f"grid[{i}]", "need at least 4 nodes per axis")
    grid = tuple(grid) * (2 // len(grid))

    # an explicit null counts as absent, so to_dict() output parses back
    if (top.get("m") is None) == (top.get("volumes") is None):
        raise ConfigError("m", "give exactly one of m or volumes")
    volumes = None
    if top.get("volumes") is not None:
        if not top["volumes"]:
            raise ConfigError("volumes", "empty volume list")
        volumes = tuple(_check_type(f"volumes[{i}]", v, float)
                        for i, v in enumerate(top["volumes"]))

    solver = _typed("solver", top.get("solver", {}), _SOLVER_KEYS)
    for key in ("smoothing", "kicks", "center"):
        if key in solver and solver[key] is not None:
            solver[key] = [_check_type(f"solver.{key}[{i}]", v, float)
                           for i, v in enumerate(solver[key])]

    diag = _typed("diagnostics", top.get("diagnostics", {}), _DIAG_KEYS)
    radii = RadiiPolicy(**_typed("diagnostics.radii", diag.pop("radii", {}), _RADII_KEYS))
    return RunConfig(
        chart=top["chart"],
        grid=grid,
        m=top.get("m"),
        volumes=volumes,
        solver=solver,
        diagnostics=DiagnosticsConfig(radii=radii, **diag),
        output=top.get("output", "run"),
        allow_nonconverged=top.get("allow_nonconverged", False),
        schema=schema,
    )


def load_config(path):
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON in {path} (line {exc.lineno}): {exc.msg}") from exc
    return parse_config(data)


def thread_cap(threads=None):
    """Worker count: ``threads`` if given, else ``$FK_THREADS``, else 1."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if not raw:
            return 1
        try:
            threads = int(raw)
        except ValueError as exc:
            raise ConfigError(THREADS_ENV, f"not an integer: {raw!r}") from exc
    return max(1, int(threads))
