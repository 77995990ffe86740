"""Command line entry point: ``bfekf <experiment> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, NumericalError
from .config import EXPERIMENTS, METHOD_CHOICES, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("bfekf")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bfekf", description="Run a filter experiment or benchmark.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="INI file overriding the shipped defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int, help="Monte Carlo run count")
    p.add_argument("--out", type=Path, default=Path("results"), help="results root directory")
    p.add_argument("--method", help=f"one of {', '.join(METHOD_CHOICES)} (comma separated allowed)")
    p.add_argument("--nw-sweep", help="comma separated n_w values for the benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(cfg):
    """Dispatch to the runner for ``cfg.experiment``."""
    if cfg.experiment in ("bench-eval", "bench-predict"):
        from . import bench
        return (bench.bench_eval if cfg.experiment == "bench-eval" else bench.bench_predict)(cfg)
    from .experiments import EXPERIMENT_RUNNERS
    return EXPERIMENT_RUNNERS[cfg.experiment](cfg)


def output_dir(root: Path, experiment: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
    return Path(root) / experiment / stamp


def _print_table(report):
    if not report.table:
        return
    cols = list(dict.fromkeys(k for r in report.table for k in r))
    print(",".join(cols))
    for r in report.table:
        print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in (r.get(c, "") for c in cols)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.experiment, args.config, seed=args.seed, runs=args.runs, out=args.out,
                          method=args.method, nw_sweep=args.nw_sweep)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    out = report.write(output_dir(cfg.out, cfg.experiment))
    _print_table(report)
    for note in report.notes:
        print(f"# {note}")
    print(f"# results written to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
