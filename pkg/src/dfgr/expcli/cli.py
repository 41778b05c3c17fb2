from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from ..dataset import load_dataset_dir, preprocess, save_split_cache
from .config import DATA_DIR_ENV, DESK_PROFILE, ConfigError, parse_config
from .report import report
from .runner import run


def cmd_prepare(args) -> int:
    data_dir = Path(args.data_dir)
    for part in ("train", "test"):
        split = load_dataset_dir(data_dir, part)
        prepared = preprocess(split)
        save_split_cache(prepared, data_dir / "cache", part, seed=args.seed)
        print(f"{args.dataset} {part}: {len(split)} images, classes {split.classes}")
    return 0


def cmd_run(args) -> int:
    config = parse_config(args.config)
    if args.desk_scale:
        config = dataclasses.replace(config, profile="desk",
                                     train=dataclasses.replace(config.train, **DESK_PROFILE))
    if args.seed is not None:
        config = dataclasses.replace(config, train=dataclasses.replace(config.train, seed=args.seed))
    if args.run_dir is not None:
        config = dataclasses.replace(config, run_dir=Path(args.run_dir))
    reports = run(config, args.repeats)
    for r in reports:
        print(f"seed {r.seed}: final accuracy {100 * r.final_accuracy:.1f}%  "
              f"(tasks: {', '.join(f'{100 * t.average_accuracy:.1f}' for t in r.tasks)})")
    if len(reports) > 1:
        print(f"mean final accuracy {100 * np.mean([r.final_accuracy for r in reports]):.1f}%")
    return 0


def cmd_report(args) -> int:
    written = report(args.runs, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfgr", description="Data-free generative replay experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="decode and cache an IDX dataset")
    p.add_argument("--dataset", choices=("mnist", "fashion_mnist"), default="mnist")
    p.add_argument("--data-dir", required=True, help=f"directory with the IDX files (or set {DATA_DIR_ENV})")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--desk-scale", action="store_true", help="capped data, short budgets, small models")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render tables and plots from finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
