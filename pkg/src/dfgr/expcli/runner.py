from __future__ import annotations

import dataclasses
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import DatasetSplit, TaskSchedule, apply_schedule, cap_per_class, load_prepared
from ..trainer import TaskResult, run_schedule
from .config import ExperimentConfig, serialize

log = logging.getLogger(__name__)

FAILURE_MARKER = "FAILED"
REPORT_FILE = "report.json"


@dataclass
class RunReport:
    tasks: list[TaskResult]
    final_accuracy: float
    average_runtime: float
    ablation_id: str
    method: str = "dfgr"
    dataset: str = "mnist"
    balance: str = "balanced"
    profile: str = "full"
    seed: int = 0
    repeat_index: int = 0

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["tasks"] = [t.to_record() for t in self.tasks]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "RunReport":
        rec = dict(rec)
        rec["tasks"] = [TaskResult.from_record(t) for t in rec["tasks"]]
        return cls(**rec)


class DiskTaskSource:
    """Loads task ``t``'s real training images from disk on demand and keeps nothing in memory."""

    def __init__(self, data_dir: Path, schedule: TaskSchedule, seed: int, max_per_class: int | None = None,
                 cache_dir: Path | None = None):
        self.data_dir = Path(data_dir)
        self.schedule = schedule
        self.seed = seed
        self.max_per_class = max_per_class
        self.cache_dir = cache_dir

    def __call__(self, t: int) -> DatasetSplit:
        split = load_prepared(self.data_dir, "train", self.cache_dir)
        if self.max_per_class is not None:
            split = cap_per_class(split, self.max_per_class, self.seed)
        return apply_schedule(split, self.schedule, self.seed)[t]


def ablation_id(config: ExperimentConfig) -> str:
    return "naive" if config.method == "naive" else config.ablation


def run_once(config: ExperimentConfig, seed: int, run_dir: Path, repeat_index: int = 0) -> RunReport:
    run_dir.mkdir(parents=True, exist_ok=True)
    train = dataclasses.replace(config.train, seed=seed)
    cfg = dataclasses.replace(config, train=train, run_dir=run_dir)
    (run_dir / "config.txt").write_text(serialize(cfg))
    for stale in ("results.jsonl", REPORT_FILE, FAILURE_MARKER):
        (run_dir / stale).unlink(missing_ok=True)
    data_dir = cfg.resolved_data_dir
    cache_dir = data_dir / "cache"
    try:
        test = load_prepared(data_dir, "test", cache_dir)
        source = DiskTaskSource(data_dir, cfg.schedule, seed, train.max_per_class, cache_dir)
        results = run_schedule(source, cfg.schedule, test, train, run_dir, method=cfg.method,
                               train_final_generator=cfg.train_final_generator)
    except BaseException:
        (run_dir / FAILURE_MARKER).write_text(traceback.format_exc())
        raise
    report = RunReport(tasks=results, final_accuracy=results[-1].average_accuracy,
                       average_runtime=float(np.sum([r.wall_time for r in results])),
                       ablation_id=ablation_id(cfg), method=cfg.method, dataset=cfg.dataset,
                       balance=cfg.balance, profile=cfg.profile, seed=seed, repeat_index=repeat_index)
    (run_dir / REPORT_FILE).write_text(json.dumps(report.to_record(), indent=2))
    return report


def run(config: ExperimentConfig, repeats: int | None = None) -> list[RunReport]:
    """Run the configured experiment ``repeats`` times with seeds base_seed + i."""
    repeats = config.repeats if repeats is None else repeats
    base = config.train.seed
    reports = []
    for i in range(repeats):
        run_dir = Path(config.run_dir) / f"seed_{base + i}" if repeats > 1 else Path(config.run_dir)
        start = time.perf_counter()
        reports.append(run_once(config, base + i, run_dir, i))
        log.info("repeat %d (seed %d): final accuracy %.4f in %.0fs", i, base + i,
                 reports[-1].final_accuracy, time.perf_counter() - start)
    if repeats > 1:
        summary = {"ablation_id": ablation_id(config), "seeds": [r.seed for r in reports],
                   "final_accuracy": [r.final_accuracy for r in reports],
                   "mean_final_accuracy": float(np.mean([r.final_accuracy for r in reports]))}
        (Path(config.run_dir) / "summary.json").write_text(json.dumps(summary, indent=2))
    return reports
