"""Two-stage per-task training: classifier (re-)training, then generator training.

Across tasks only the generator, the BN snapshot and the feature-statistics store carry knowledge
of earlier classes; real images of a task are dropped as soon as that task is finished.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetSplit, TaskSchedule, apply_schedule, iterate_batches
from .losses import (
    GeneratorLossParts,
    LossWeights,
    bn_stat_loss,
    cross_entropy,
    diversity_loss,
    feature_map_loss,
    focal_loss,
    smoothing_loss,
    split_for_diversity,
    total_classifier_loss,
    total_generator_loss,
)
from .models import (
    BNSnapshot,
    ConditionalGenerator,
    ResNetClassifier,
    build_classifier,
    build_generator,
    generate,
    sample_noise,
    save_checkpoint,
    save_snapshot,
    snapshot_bn,
)
from .replay import ReplayState, init_replay, mixing_ratio, sample_labels, update_state
from .stats import FeatureStatBuilder, FeatureStatStore, merge_moments, save_store

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    classifier_batch: int = 128
    generator_batch: int = 32
    max_epochs: int = 1000
    patience_classifier: int = 50
    patience_generator: int = 75
    learning_rate: float = 1e-4
    generator_learning_rate: float | None = None  # defaults to learning_rate
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    loss_weights: LossWeights = field(default_factory=LossWeights)
    replay_adjust: bool = True
    seed: int = 0
    steps_per_generator_epoch: int = 100
    generator_max_epochs: int | None = None  # defaults to max_epochs
    gamma_focal: float = 2.0
    min_delta: float = 1e-4
    model_preset: str = "full"
    max_per_class: int | None = None  # train-split cap applied before the schedule
    eval_batch: int = 1000

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        for name in ("classifier_batch", "generator_batch", "patience_classifier", "patience_generator",
                     "steps_per_generator_epoch", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.max_epochs < 0 or (self.generator_max_epochs is not None and self.generator_max_epochs < 0):
            raise ConfigurationError("epoch budgets must be >= 0")
        lrs = (self.learning_rate, self.learning_rate if self.generator_learning_rate is None else self.generator_learning_rate)
        if not all(lr > 0 for lr in lrs):
            raise ConfigurationError("learning rates must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.max_per_class is not None and self.max_per_class < 1:
            raise ConfigurationError("max_per_class must be >= 1")

    @property
    def generator_epochs(self) -> int:
        return self.max_epochs if self.generator_max_epochs is None else self.generator_max_epochs

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class EarlyStopState:
    patience: int
    min_delta: float = 1e-4
    best_value: float = math.inf
    epochs_since_best: int = 0

    def update(self, value: float) -> bool:
        """Record one epoch's monitored value; True means stop."""
        if value < self.best_value - self.min_delta:
            self.best_value = value
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


@dataclass
class TaskResult:
    task_index: int
    task_classes: list[int]
    seen_classes: list[int]
    per_class_accuracy: dict[int, float]
    average_accuracy: float
    wall_time: float = 0.0
    checkpoints: list[str] = field(default_factory=list)
    classifier_epochs: int = 0
    generator_epochs: int = 0
    mixing_ratio: float = 0.0
    classifier_loss: float | None = None
    generator_loss: float | None = None
    config_hash: str = ""
    seed: int = 0
    replay_probs: dict[int, float] | None = None
    # accuracy pooled over all test images of the seen classes (class sizes act as weights)
    overall_accuracy: float | None = None

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        if self.replay_probs is not None:
            rec["replay_probs"] = {str(k): v for k, v in self.replay_probs.items()}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TaskResult":
        rec = dict(rec)
        rec["per_class_accuracy"] = {int(k): float(v) for k, v in rec["per_class_accuracy"].items()}
        if rec.get("replay_probs") is not None:
            rec["replay_probs"] = {int(k): float(v) for k, v in rec["replay_probs"].items()}
        return cls(**rec)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def make_adam(params, config: TrainConfig, lr: float | None = None) -> torch.optim.Adam:
    lr = config.learning_rate if lr is None else lr
    return torch.optim.Adam(params, lr=lr, betas=(config.adam_beta1, config.adam_beta2), eps=1e-8)


@torch.no_grad()
def evaluate(classifier: ResNetClassifier, test_split: DatasetSplit, seen_classes: Sequence[int],
             batch_size: int = 1000) -> tuple[dict[int, float], float]:
    """Per-class accuracy with the argmax taken over seen-class logits only."""
    seen = sorted(int(c) for c in seen_classes)
    split = test_split.restrict(seen)
    was_training = classifier.training
    classifier.eval()
    seen_t = torch.tensor(seen)
    preds = []
    for start in range(0, len(split), batch_size):
        x = torch.from_numpy(split.images[start:start + batch_size].copy())
        logits = classifier(x).logits[:, seen_t]
        preds.append(seen_t[logits.argmax(1)])
    classifier.train(was_training)
    pred = torch.cat(preds).numpy() if preds else np.empty(0, dtype=np.int64)
    per_class = {}
    for c in seen:
        mask = split.labels == c
        per_class[c] = float((pred[mask] == c).mean()) if mask.any() else 0.0
    return per_class, float(np.mean(list(per_class.values()))) if per_class else 0.0


def pooled_accuracy(per_class_accuracy: dict[int, float], class_counts: dict[int, int]) -> float:
    """Fraction of all test images classified correctly, i.e. per-class accuracy weighted by class size."""
    total = sum(class_counts[c] for c in per_class_accuracy)
    return float(sum(per_class_accuracy[c] * class_counts[c] for c in per_class_accuracy) / total) if total else 0.0


@torch.no_grad()
def collect_feature_stats(classifier: ResNetClassifier, split: DatasetSplit, batch_size: int = 500) -> FeatureStatStore:
    builder = FeatureStatBuilder(classifier.feature_dim)
    was_training = classifier.training
    classifier.eval()
    for start in range(0, len(split), batch_size):
        x = torch.from_numpy(split.images[start:start + batch_size].copy())
        builder.accumulate(classifier(x).features, split.labels[start:start + batch_size])
    classifier.train(was_training)
    return builder.finalize()


def train_classifier_task(classifier: ResNetClassifier, task_split: DatasetSplit, test_split: DatasetSplit,
                          config: TrainConfig, *, task_index: int = 0, previous_classes: Sequence[int] = (),
                          generator: ConditionalGenerator | None = None, replay_state: ReplayState | None = None,
                          real_loss: str = "focal", replay_log: Callable[[dict], None] | None = None,
                          replay: bool = True) -> tuple[ResNetClassifier, TaskResult, ReplayState | None]:
    """Train on one task's real data, mixing in generated replay of ``previous_classes``.

    ``replay=False`` gives plain fine-tuning on the current task (previous classes are still evaluated).
    """
    previous = [int(c) for c in previous_classes]
    current = task_split.classes
    replaying = replay and bool(previous)
    if replaying and (generator is None or replay_state is None):
        raise ConfigurationError(f"task {task_index} has previous classes but no generator/replay state")
    m = mixing_ratio(previous, current) if replaying else 0.0
    start_time = time.perf_counter()

    opt = make_adam(classifier.parameters(), config)
    stopper = EarlyStopState(config.patience_classifier, config.min_delta)
    if generator is not None:
        generator.eval()
    epochs_run, last_loss = 0, None
    for epoch in range(config.max_epochs):
        classifier.train()
        epoch_losses = []
        for step, batch in enumerate(iterate_batches(task_split, config.classifier_batch,
                                                     derive_seed(config.seed, task_index, epoch))):
            x, y = batch.pixels, batch.labels
            n_real = len(y)
            if replaying:
                r_labels = sample_labels(replay_state, config.classifier_batch,
                                         derive_seed(config.seed, task_index, epoch, step, 1))
                fake = generate(generator, r_labels, derive_seed(config.seed, task_index, epoch, step, 2))
                x = torch.cat([x, fake.pixels.detach()])
            logits = classifier(x).logits
            if real_loss == "focal":
                real = focal_loss(logits[:n_real], y, config.gamma_focal)
            else:
                real = cross_entropy(logits[:n_real], y)
            if replaying:
                per_sample = cross_entropy(logits[n_real:], fake.labels, reduction="none")
                loss = total_classifier_loss(real, per_sample.mean(), m)
            else:
                loss = real
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
            if replaying and config.replay_adjust:
                replay_state = update_state(replay_state, per_sample.detach().numpy(), fake.labels.numpy())
            if replaying and replay_log is not None:
                replay_log({"task": task_index, "epoch": epoch, "step": step, **replay_state.as_record()})
        epochs_run = epoch + 1
        last_loss = float(np.mean(epoch_losses))
        log.info("task %d classifier epoch %d loss %.4f", task_index, epoch, last_loss)
        if stopper.update(last_loss):
            break

    seen = sorted(previous + current)
    per_class, avg = evaluate(classifier, test_split, seen, config.eval_batch)
    counts = test_split.restrict(seen).per_class_counts
    result = TaskResult(
        task_index=task_index, task_classes=current, seen_classes=seen, per_class_accuracy=per_class,
        average_accuracy=avg, wall_time=time.perf_counter() - start_time, classifier_epochs=epochs_run,
        mixing_ratio=m, classifier_loss=last_loss, config_hash=config.digest(), seed=config.seed,
        replay_probs=dict(zip(replay_state.classes, replay_state.probs)) if replay_state is not None else None,
        overall_accuracy=pooled_accuracy(per_class, {c: counts.get(c, 0) for c in per_class}),
    )
    return classifier, result, replay_state


def generator_loss_parts(generator: ConditionalGenerator, classifier: ResNetClassifier, snapshot: BNSnapshot,
                         store: FeatureStatStore | None, labels: torch.Tensor, noise_seed: int, split_seed: int,
                         need_feat: bool = True) -> GeneratorLossParts:
    dtype = next(generator.parameters()).dtype
    z = sample_noise(len(labels), generator.noise_dim, noise_seed).to(dtype)
    images = generator(z, labels)
    out = classifier(images, capture_bn=True)
    ce = cross_entropy(out.logits, labels)
    if need_feat and store is not None:
        feat = feature_map_loss(out.features, merge_moments(labels, store))
    else:
        feat = torch.zeros(())
    bn = bn_stat_loss(out.batch_bn, snapshot)
    ia, ib = split_for_diversity(len(labels), split_seed)
    probs = F.softmax(out.logits, dim=1)
    div = diversity_loss(probs[torch.from_numpy(ia)], probs[torch.from_numpy(ib)], validate=False)
    sm = smoothing_loss(images)
    return GeneratorLossParts(ce, feat, bn, div, sm)


def train_generator(generator: ConditionalGenerator, classifier: ResNetClassifier, snapshot: BNSnapshot,
                    store: FeatureStatStore | None, seen_classes: Sequence[int], config: TrainConfig,
                    *, task_index: int = 0, step_log: Callable[[dict], None] | None = None,
                    ) -> tuple[ConditionalGenerator, dict]:
    """Fit the generator against the frozen classifier; only generator parameters are updated."""
    seen = np.asarray(sorted(int(c) for c in seen_classes), dtype=np.int64)
    if len(seen) == 0:
        raise ConfigurationError("generator training needs at least one seen class")
    weights = config.loss_weights
    generator.set_trained_classes(seen.tolist())
    was_training = classifier.training
    flags = [p.requires_grad for p in classifier.parameters()]
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)

    opt = make_adam(generator.parameters(), config, config.generator_learning_rate)
    stopper = EarlyStopState(config.patience_generator, config.min_delta)
    rng = np.random.default_rng(derive_seed(config.seed, task_index, 7))
    epochs_run, last_loss, last_parts = 0, None, None
    try:
        generator.train()
        for epoch in range(config.generator_epochs):
            totals = []
            for step in range(config.steps_per_generator_epoch):
                labels = torch.from_numpy(seen[rng.integers(0, len(seen), size=config.generator_batch)])
                key = (config.seed, task_index, epoch, step)
                parts = generator_loss_parts(generator, classifier, snapshot, store, labels,
                                             derive_seed(*key, 3), derive_seed(*key, 4),
                                             need_feat=weights.alpha > 0)
                total = total_generator_loss(weights, parts)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                totals.append(total.item())
                last_parts = parts
            epochs_run = epoch + 1
            last_loss = float(np.mean(totals))
            record = {"task": task_index, "epoch": epoch, "total": last_loss,
                      **{k: float(v.detach()) for k, v in last_parts._asdict().items()}}
            log.info("task %d generator epoch %d %s", task_index, epoch,
                     " ".join(f"{k}={v:.4f}" for k, v in record.items() if isinstance(v, float)))
            if step_log is not None:
                step_log(record)
            if stopper.update(last_loss):
                break
    finally:
        for p, flag in zip(classifier.parameters(), flags):
            p.requires_grad_(flag)
        classifier.train(was_training)
    generator.eval()
    return generator, {"epochs": epochs_run, "loss": last_loss}


# -- orchestration ----------------------------------------------------------------------------------

TaskSource = Callable[[int], DatasetSplit]


def schedule_source(train_split: DatasetSplit, schedule: TaskSchedule, seed: int) -> TaskSource:
    """Task loader over an in-memory split (convenient, but keeps all real data reachable)."""
    splits = apply_schedule(train_split, schedule, seed)
    return lambda t: splits[t]


class _JsonLines:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def run_schedule(tasks: TaskSource | DatasetSplit, schedule: TaskSchedule, test_split: DatasetSplit,
                 config: TrainConfig, run_dir: str | os.PathLike | None = None, method: str = "dfgr",
                 on_task_end: Callable[[int, dict], None] | None = None,
                 train_final_generator: bool = True) -> list[TaskResult]:
    """Run every task of ``schedule`` in order and return one TaskResult per task.

    With ``train_final_generator=False`` the generator stage of the last task is skipped, since no
    later task would replay from it (the statistics and BN snapshot are still stored).

    ``tasks`` is either a callable returning the real training split of task ``t`` (preferred: the
    split can be dropped after use) or a full training split that the schedule is applied to.
    """
    if method not in ("dfgr", "naive"):
        raise ConfigurationError(f"unknown method {method!r}")
    if isinstance(tasks, DatasetSplit):
        tasks = schedule_source(tasks, schedule, config.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    results_log = _JsonLines(run_dir / "results.jsonl" if run_dir else None)

    seed_everything(config.seed)
    classifier = build_classifier(config.model_preset)
    generator: ConditionalGenerator | None = None
    store: FeatureStatStore | None = None
    results: list[TaskResult] = []
    seen: list[int] = []
    for t in range(len(schedule)):
        task_start = time.perf_counter()
        split = tasks(t)
        previous = list(seen)
        state = init_replay(previous) if (method == "dfgr" and previous) else None
        task_dir = run_dir / f"task_{t + 1}" if run_dir else None
        replay_log = _JsonLines(task_dir / "replay.jsonl" if task_dir else None)
        classifier, result, state = train_classifier_task(
            classifier, split, test_split, config, task_index=t, previous_classes=previous,
            generator=generator if state is not None else None, replay_state=state,
            real_loss="focal" if method == "dfgr" else "ce", replay_log=replay_log, replay=method == "dfgr")
        seen = sorted(previous + split.classes)

        if method == "dfgr":
            fresh = collect_feature_stats(classifier, split)
            store = fresh if store is None else store.updated(fresh)
            snapshot = snapshot_bn(classifier)
            paths = []
            if train_final_generator or t < len(schedule) - 1:
                torch.manual_seed(derive_seed(config.seed, t, 11))
                generator = build_generator(config.model_preset, num_classes=classifier.num_classes)
                gen_log = _JsonLines(task_dir / "generator.jsonl" if task_dir else None)
                generator, info = train_generator(generator, classifier, snapshot, store, seen, config,
                                                  task_index=t, step_log=gen_log)
                result.generator_epochs = info["epochs"]
                result.generator_loss = info["loss"]
                if task_dir is not None:
                    paths.append(save_checkpoint(generator, task_dir, "generator",
                                                 meta={"preset": config.model_preset,
                                                       "classes": ",".join(map(str, seen))}))
            if task_dir is not None:
                paths += [save_snapshot(snapshot, task_dir), save_store(store, task_dir)]
                result.checkpoints = [str(p) for p in paths]
        # the real data of this task is not needed any more
        del split
        result.wall_time = time.perf_counter() - task_start
        results.append(result)
        results_log({"method": method, **result.to_record()})
        log.info("task %d done: average accuracy %.4f (%s)", t, result.average_accuracy,
                 {k: round(v, 3) for k, v in result.per_class_accuracy.items()})
        if on_task_end is not None:
            on_task_end(t, {"classifier": classifier, "generator": generator, "store": store,
                            "snapshot": snapshot if method == "dfgr" else None, "replay_state": state})
    return results


def naive_baseline(tasks: TaskSource | DatasetSplit, schedule: TaskSchedule, test_split: DatasetSplit,
                   config: TrainConfig, run_dir: str | os.PathLike | None = None) -> list[TaskResult]:
    """Plain cross-entropy fine-tuning task after task: no generator, no replay."""
    return run_schedule(tasks, schedule, test_split, config, run_dir, method="naive")
