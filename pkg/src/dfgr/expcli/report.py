"""Tables and plots rebuilt purely from persisted run records (results.jsonl + config.txt)."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..losses import ABLATION_LABELS, ABLATIONS
from ..trainer import TaskResult
from .config import ConfigError, parse_config

log = logging.getLogger(__name__)


@dataclass
class LoadedRun:
    path: Path
    dataset: str
    balance: str
    ablation_id: str
    tasks: list[TaskResult]

    @property
    def group(self) -> tuple[str, str, str]:
        return self.dataset, self.balance, self.ablation_id

    @property
    def final_accuracy(self) -> float:
        return self.tasks[-1].average_accuracy

    @property
    def total_time(self) -> float:
        return float(sum(t.wall_time for t in self.tasks))


def find_run_dirs(paths: Sequence[str | Path]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "results.jsonl").exists():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.rglob("results.jsonl")))
        else:
            warnings.warn(f"skipping {p}: no run records found")
    return found


def load_run(path: Path) -> LoadedRun:
    cfg = parse_config(path / "config.txt")
    tasks, methods = [], set()
    with open(path / "results.jsonl") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                methods.add(rec.pop("method", cfg.method))
                tasks.append(TaskResult.from_record(rec))
    if not tasks:
        raise ValueError("run has no task records")
    tasks.sort(key=lambda t: t.task_index)
    ablation = "naive" if cfg.method == "naive" else cfg.ablation
    return LoadedRun(path, cfg.dataset, cfg.balance, ablation, tasks)


def load_runs(paths: Sequence[str | Path]) -> list[LoadedRun]:
    if not paths:
        raise ValueError("report needs at least one run directory")
    runs = []
    for p in find_run_dirs(paths):
        if (p / "FAILED").exists():
            warnings.warn(f"skipping failed run {p}")
            continue
        try:
            runs.append(load_run(p))
        except (OSError, ValueError, KeyError, TypeError, ConfigError) as exc:
            warnings.warn(f"skipping corrupt run {p}: {exc}")
    if not runs:
        raise ValueError("no readable runs among the given paths")
    return runs


def per_class_table(runs: Sequence[LoadedRun]) -> list[list[str]]:
    """Class-by-task accuracy grid in percent, averaged over runs; '-' where a class was not seen yet."""
    n_tasks = max(len(r.tasks) for r in runs)
    order: list[int] = []
    for r in runs:
        for t in r.tasks:
            order.extend(c for c in t.task_classes if c not in order)
    header = ["Class"] + [f"Task {i + 1}" for i in range(n_tasks)]
    rows = [header]
    for c in order:
        row = [f"Class {c}"]
        for i in range(n_tasks):
            vals = [r.tasks[i].per_class_accuracy[c] for r in runs
                    if i < len(r.tasks) and c in r.tasks[i].per_class_accuracy]
            row.append(f"{100 * np.mean(vals):.1f}" if vals else "-")
        rows.append(row)
    avg = ["Average"]
    for i in range(n_tasks):
        vals = [r.tasks[i].average_accuracy for r in runs if i < len(r.tasks)]
        avg.append(f"{100 * np.mean(vals):.1f}" if vals else "-")
    rows.append(avg)
    return rows


def _hhmm(seconds: float) -> str:
    minutes = int(round(seconds / 60))
    return f"{minutes // 60}:{minutes % 60:02d}"


def ablation_table(runs: Sequence[LoadedRun]) -> list[list[str]]:
    """Rows per ablation (plus naive), columns Acc./Avg. Time per dataset-balance pair."""
    cells = defaultdict(list)
    for r in runs:
        cells[r.group].append(r)
    columns = sorted({(r.dataset, r.balance) for r in runs})
    ids = [a for a in list(ABLATIONS) + ["naive"] if any(r.ablation_id == a for r in runs)]
    header = ["Method"]
    for d, b in columns:
        header += [f"{d} {b} Acc.", f"{d} {b} Avg. Time"]
    rows = [header]
    for a in ids:
        row = [ABLATION_LABELS.get(a, "Naive")]
        for d, b in columns:
            group = cells.get((d, b, a), [])
            if group:
                row += [f"{100 * np.mean([g.final_accuracy for g in group]):.1f}",
                        _hhmm(np.mean([g.total_time for g in group]))]
            else:
                row += ["-", "-"]
        rows.append(row)
    return rows


def write_tsv(rows: list[list[str]], path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, delimiter="\t").writerows(rows)
    return path


def plot_accuracy(runs: Sequence[LoadedRun], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_group = defaultdict(list)
    for r in runs:
        by_group[r.group].append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for (d, b, a), group in sorted(by_group.items()):
        n = min(len(g.tasks) for g in group)
        acc = [100 * np.mean([g.tasks[i].average_accuracy for g in group]) for i in range(n)]
        ax.plot(range(1, n + 1), acc, marker="o", label=f"{ABLATION_LABELS.get(a, 'Naive')} ({d}, {b})")
    ax.set_xlabel("task")
    ax.set_ylabel("average accuracy over seen classes (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def report(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict[str, Path]:
    runs = load_runs(run_dirs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    by_group = defaultdict(list)
    for r in runs:
        by_group[r.group].append(r)
    for (d, b, a), group in sorted(by_group.items()):
        name = f"per_class_{d}_{b}_{a}"
        written[name] = write_tsv(per_class_table(group), out_dir / f"{name}.tsv")
    written["ablation"] = write_tsv(ablation_table(runs), out_dir / "ablation.tsv")
    written["plot"] = plot_accuracy(runs, out_dir / "accuracy_vs_task.png")
    return written
