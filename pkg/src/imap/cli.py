"""Command line entry point: ``imap run``, ``imap verify``, ``imap plot-data``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ALGOS, ConfigError, RunConfig, load_config, parse_value
from .nn import CheckpointError
from .runner import TrainingDivergence, checkpoint_roundtrip

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

logger = logging.getLogger("imap")


def _overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    for flag, key in (("algo", "algo"), ("seed", "seed"), ("iterations", "iterations"), ("output_dir", "output_dir")):
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    return out


def cmd_run(args) -> int:
    from .runner import Runner

    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(_overrides(args))
        runner = Runner(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = runner.run()
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(f"partial metrics in {Path(cfg.output_dir) / 'metrics.csv'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    try:
        results = run_checks(args.only, args.report_dir, args.fixture)
    except (OSError, ValueError) as exc:
        print(f"verify error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name} ({res.seconds:.1f}s)")
        if not res.passed:
            print(f"  {json.dumps(res.details, default=str)[:2000]}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def _run_dirs(root: Path) -> list[Path]:
    if (root / "metrics.csv").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/metrics.csv"))


def cmd_plot_data(args) -> int:
    root = Path(args.run_dir)
    runs = _run_dirs(root)
    if not runs:
        print(f"no metrics.csv under {root}", file=sys.stderr)
        return EXIT_FAILED
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(("run", "algo", "seed", "iter", "metric", "value"))
        for run in runs:
            cfg = json.loads((run / "config.json").read_text()) if (run / "config.json").exists() else {}
            with open(run / "metrics.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    for metric, value in row.items():
                        if metric != "iter" and value != "nan":
                            writer.writerow((run.name, cfg.get("algo", ""), cfg.get("seed", ""), row["iter"], metric, value))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_checkpoint(args) -> int:
    try:
        ok = checkpoint_roundtrip(args.path, args.run_dir)
    except (CheckpointError, ConfigError, OSError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print("roundtrip ok" if ok else "roundtrip MISMATCH")
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imap", description="Implicit multi-agent preference learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one algorithm on one environment")
    run.add_argument("--config", help="TOML config file (defaults used when omitted)")
    run.add_argument("--algo", choices=ALGOS)
    run.add_argument("--seed", type=int)
    run.add_argument("--iterations", type=int)
    run.add_argument("--output-dir", dest="output_dir")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run the oracle suite")
    verify.add_argument("--only", choices=("gradients", "prop1", "prop2", "prop3", "soft_value", "theorem1"))
    verify.add_argument("--report-dir", dest="report_dir")
    verify.add_argument("--fixture", help="JSON mixer fixture for the prop2 check")
    verify.set_defaults(func=cmd_verify)

    plot = sub.add_parser("plot-data", help="emit tidy CSV from one run or a directory of runs")
    plot.add_argument("--run-dir", dest="run_dir", required=True)
    plot.add_argument("--output", help="write here instead of stdout")
    plot.set_defaults(func=cmd_plot_data)

    ck = sub.add_parser("checkpoint", help="check that a checkpoint survives load and re-save")
    ck.add_argument("path")
    ck.add_argument("--run-dir", dest="run_dir")
    ck.set_defaults(func=cmd_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
