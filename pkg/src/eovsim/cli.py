"""Command line entry point: ``eovsim run|sweep|classify|report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .classifier import parse_ledger
from .config import SimConfig, set_field
from .errors import ConfigInvalid, InsufficientData, MalformedTrace, SimError
from .experiment import SweepSpec, load_json, run_single, run_sweep, trend_report

log = logging.getLogger("eovsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4

OUT_ENV = "EOVSIM_OUT"


def default_out() -> str:
    return os.environ.get(OUT_ENV, "eovsim-out")


def _overrides(pairs: list[str] | None) -> list[tuple[str, str]]:
    out = []
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigInvalid(f"override {item!r} is not key=value")
        out.append((key.strip(), value))
    return out


def cmd_run(args) -> int:
    config = load_json(args.config) if args.config else {}
    for key, value in _overrides(args.set):
        set_field(config, key, value)
    workload = load_json(args.workload) if args.workload else {}
    for key, value in _overrides(args.workload_set):
        set_field(workload, key, value)
    out = Path(args.out or default_out())
    result = run_single(SimConfig.from_dict(config), workload, out)
    s = result.stats
    print(
        f"{s.total_submitted} txs, {s.failure_pct:.2f}% failed, "
        f"avg latency {s.avg_total_latency_ms:.1f} ms, {s.committed_tps:.1f} tps -> {out}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.sweep)
    for key, value in _overrides(args.set):
        set_field(spec.base_config, key, value)
    out = Path(args.out or default_out())
    path = run_sweep(spec, out, parallelism=args.parallel)
    print(path)
    return EXIT_OK


def cmd_classify(args) -> int:
    stats = parse_ledger(args.trace)
    if args.json:
        payload = {
            "counts": stats.counts,
            "early_aborts": stats.early_aborts,
            "total_submitted": stats.total_submitted,
            "percentages": stats.percentages,
            "avg_total_latency_ms": stats.avg_total_latency_ms,
            "committed_tps": stats.committed_tps,
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    pct = stats.percentages
    print(f"total submitted: {stats.total_submitted}")
    for status, count in stats.counts.items():
        print(f"  {status:28s} {count:8d}  {pct[status]:6.2f}%")
    print(f"  {'early aborts (off ledger)':28s} {stats.early_aborts:8d}  {pct['EARLY_ABORT_OFFLEDGER']:6.2f}%")
    print(f"avg latency: {stats.avg_total_latency_ms:.2f} ms, committed tps: {stats.committed_tps:.2f}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = trend_report(args.csv)
    print(report.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eovsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation")
    p.add_argument("--config", help="JSON file with SimConfig fields")
    p.add_argument("--workload", help="JSON workload file (chaincode, preset or mix, rate_tps, ...)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./eovsim-out)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted for nested)")
    p.add_argument("--workload-set", action="append", metavar="KEY=VALUE", help="override a workload field")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    p.add_argument("sweep", help="JSON sweep file")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./eovsim-out)")
    p.add_argument("--parallel", type=int, default=1, help="number of worker processes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a base config field")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("classify", help="recompute statistics from a ledger trace")
    p.add_argument("trace")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", help="best/worst block size and conflict trends from a sweep CSV")
    p.add_argument("csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigInvalid, SimError) as exc:
        if isinstance(exc, MalformedTrace):
            print(f"error: malformed trace: {exc}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(exc, InsufficientData):
            print(f"error: insufficient data: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
