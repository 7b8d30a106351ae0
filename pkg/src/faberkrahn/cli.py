"""Command-line entry point ``fk``.

Exit codes: 0 all checks passed, 1 an invariant check failed, 2 bad config or
arguments, 3 a solve did not converge (unless ``--allow-nonconverged``),
4 missing or unreadable run directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import ConfigError, load_config
from .experiments import (ManifestError, export_results, run_catenoid_drift, run_config,
                          write_drift_run)
from .geodesic import BallTruncationError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_NO_RUN = 4


def _grid_arg(text):
    try:
        n1, n2 = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected <n1>x<n2>, got {text!r}") from exc
    return n1, n2


def _float_list(text):
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="fk", description="Faber-Krahn minimisers on 2-D charts")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    for name, text in (("solve", "minimise lambda_1 at the configured volume"),
                       ("profile", "minimise lambda_1 over the configured volume list")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--out", help="run directory (overrides the config)")
        s.add_argument("--threads", type=int, help="worker cap (default: $FK_THREADS or 1)")
        s.add_argument("--allow-nonconverged", action="store_true",
                       help="do not fail when a solve hits max_iter")

    d = sub.add_parser("drift", help="geodesic balls drifting out along a catenoid end")
    d.add_argument("--neck", type=float, required=True)
    d.add_argument("--volume", type=float, required=True)
    d.add_argument("--positions", type=_float_list, required=True, help="e.g. 3,6,12,24,48")
    d.add_argument("--grid", type=_grid_arg, default=(1024, 512), help="<n1>x<n2>")
    d.add_argument("--truncation", type=float, default=60.0, help="chart is |t| < T")
    d.add_argument("--out", required=True)
    d.add_argument("--threads", type=int)

    e = sub.add_parser("export", help="flat tables from a finished run")
    e.add_argument("--run", required=True)
    e.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def _report(outcome, allow_nonconverged):
    failed = sorted(k for k, ok in outcome.checks.items() if not ok)
    for name in failed:
        print(f"check failed: {name}", file=sys.stderr)
    print(f"wrote {outcome.run_dir}")
    if not outcome.converged and not allow_nonconverged:
        print("solver did not converge (use --allow-nonconverged to accept)", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("solve", "profile"):
            cfg = load_config(args.config)
            if args.command == "profile" and cfg.volumes is None:
                raise ConfigError("volumes", "profile runs need a volume list")
            outcome = run_config(cfg, mode=args.command, out_dir=args.out, threads=args.threads)
            return _report(outcome, args.allow_nonconverged or cfg.allow_nonconverged)
        if args.command == "drift":
            t0 = time.perf_counter()
            res = run_catenoid_drift(args.neck, args.volume, args.positions, grid=args.grid,
                                     T=args.truncation, threads=args.threads)
            outcome = write_drift_run(res, args.out,
                                      timings={"seconds": time.perf_counter() - t0})
            for row in res.rows():
                print("t={t:g} r={r:.10f} lambda={lambda:.12f} gap={gap:.6e}".format(**row))
            return _report(outcome, True)
        if args.command == "export":
            for path in export_results(args.run, args.format):
                print(path)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_RUN
    except (BallTruncationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
