"""Command line entry point: ``ckcalab {run,report,cost,inspect-checkpoint}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness.checkpoint import CheckpointError, describe, load_checkpoint
from .harness.config import METHODS, ConfigError, load_config, with_overrides
from .harness.cost import cost_account, format_cost_table
from .harness.reports import CSV_NAME, SUMMARY_NAME, format_table, read_csv, summarize
from .harness.runner import ExperimentAborted, run_experiment
from .stream import REGIMES


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _cmd_run(args) -> int:
    path = args.config_opt or args.config
    cfg = load_config(path)
    cfg = with_overrides(cfg, out=args.out, seeds=args.seeds, method=args.method,
                         regime=args.regime, stages=args.stages)
    if args.no_checkpoints:
        from dataclasses import replace
        cfg = replace(cfg, save_checkpoints=False)
    result = run_experiment(cfg, workers=args.workers, resume=args.resume)
    print(format_table(result.summary))
    print(f"\nreports written to {cfg.out_dir}")
    return 0


def _load_dir(directory: str):
    csv_path = Path(directory) / CSV_NAME
    if not csv_path.exists():
        raise FileNotFoundError(f"{csv_path} not found; run an experiment first")
    return read_csv(csv_path)


def _cmd_report(args) -> int:
    reports = _load_dir(args.dir)
    summary = summarize(reports)
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(format_table(summary))
    return 0


def _cmd_cost(args) -> int:
    rows = cost_account(_load_dir(args.dir))
    print(format_cost_table(rows))
    return 0


def _cmd_inspect(args) -> int:
    print(json.dumps(describe(load_checkpoint(args.path)), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckcalab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every stage")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a YAML config")
    run.add_argument("config", nargs="?", help="config file (defaults apply when omitted)")
    run.add_argument("--config", dest="config_opt", help="config file, same as the positional")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seeds", type=_seeds, help="comma-separated master seeds")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--regime", choices=REGIMES)
    run.add_argument("--stages", type=int, help="number of stream stages")
    run.add_argument("--workers", type=int, default=1, help="seeds run in parallel processes")
    run.add_argument("--resume", help="continue one seed from a stage checkpoint")
    run.add_argument("--no-checkpoints", action="store_true")
    run.set_defaults(fn=_cmd_run)

    rep = sub.add_parser("report", help=f"summarise {CSV_NAME} of a run directory")
    rep.add_argument("dir")
    rep.add_argument("--json", action="store_true", help=f"print the {SUMMARY_NAME} structure")
    rep.set_defaults(fn=_cmd_report)

    cost = sub.add_parser("cost", help="cumulative training / storage cost of a run directory")
    cost.add_argument("dir")
    cost.set_defaults(fn=_cmd_cost)

    insp = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and contents")
    insp.add_argument("path")
    insp.set_defaults(fn=_cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ExperimentAborted, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
