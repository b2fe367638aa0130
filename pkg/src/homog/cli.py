"""``homog`` command line.

::

    homog <command> --config FILE [--out DIR] [--seed N] [--threads N]
    homog verify --tier fast|full [--criteria 1 2 ...] [--out DIR]
    homog report MANIFEST [MANIFEST ...] --out DIR

Exit codes: 0 success, 1 failed verification criteria, 2 invalid config,
3 resolution or budget error, 4 numerical failure.  ``HOMOG_THREADS``
overrides ``--threads``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, HomogError
from .runner import COMMANDS, emit_report, run_experiment

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 4

log = logging.getLogger("homog")


def _threads(arg: int | None) -> int | None:
    env = os.environ.get("HOMOG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HOMOG_THREADS must be an integer, got {env!r}") from None
    return arg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homog", description="Periodic and multi-scale homogenization lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        if name == "verify":
            continue
        p = sub.add_parser(name, help=f"run a {name} experiment from a config file")
        p.add_argument("--config", required=True, help="experiment config (JSON) or a manifest to re-run")
        p.add_argument("--out", help="output directory (overrides the config's 'output')")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="Monte Carlo worker threads")
    p = sub.add_parser("verify", help="run the acceptance battery")
    p.add_argument("--tier", choices=("fast", "full"), default="fast")
    p.add_argument("--criteria", type=int, nargs="+", help="subset of criterion ids")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write verify.csv and a manifest here")
    p.add_argument("--threads", type=int, help="Monte Carlo worker threads")
    p = sub.add_parser("report", help="merge the CSV outputs of several runs")
    p.add_argument("manifests", nargs="*", help="manifest.json files")
    p.add_argument("--out", required=True, help="directory for report.csv and report.json")
    return parser


def _run(args) -> int:
    if args.command == "report":
        rows = emit_report(args.manifests, args.out)
        print(f"{len(rows)} rows written to {args.out}")
        return EXIT_OK
    threads = _threads(args.threads)
    if threads is not None:
        os.environ["HOMOG_THREADS"] = str(threads)
    if args.command == "verify":
        from .verify import verify_suite

        if args.out:
            cfg = {"command": "verify", "seed": args.seed, "params": {"tier": args.tier}}
            if args.criteria:
                cfg["params"]["criteria"] = args.criteria
            manifest = run_experiment(cfg, args.out, threads=threads)
            return EXIT_VERIFY if manifest.failed_criteria else EXIT_OK
        results = verify_suite(args.tier, args.criteria, seed=args.seed)
        return EXIT_VERIFY if any(r.gating and not r.passed for r in results) else EXIT_OK
    manifest = run_experiment(args.config, args.out, seed=args.seed, threads=threads)
    for name, digest in manifest.outputs:
        print(f"{name}  {digest}")
    print(f"manifest: {os.path.join(manifest.directory, 'manifest.json')} ({manifest.seconds:.1f}s)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except HomogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
