"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..dataset import BALANCED_SCHEDULE, IMBALANCED_SCHEDULE, TaskSchedule
from ..losses import ABLATIONS, LossWeights
from ..trainer import ConfigurationError, TrainConfig

DATASETS = ("mnist", "fashion_mnist")
BALANCES = ("balanced", "imbalanced")
METHODS = ("dfgr", "naive")
PROFILES = ("full", "desk")
DATA_DIR_ENV = "DFGR_DATA_DIR"

# desk profile: capped data and short budgets so a 3-task run fits on one CPU core
DESK_PROFILE = dict(max_per_class=1000, max_epochs=30, patience_classifier=10, steps_per_generator_epoch=100,
                    generator_max_epochs=15, generator_learning_rate=3e-3, model_preset="desk")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    balance: str = "balanced"
    method: str = "dfgr"
    ablation: str = "ls_ce_feat_ra"
    profile: str = "full"
    run_dir: Path = Path("runs/default")
    data_dir: Path | None = None
    repeats: int = 1
    train_final_generator: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def schedule(self) -> TaskSchedule:
        return BALANCED_SCHEDULE if self.balance == "balanced" else IMBALANCED_SCHEDULE

    @property
    def resolved_data_dir(self) -> Path:
        if os.environ.get(DATA_DIR_ENV):
            return Path(os.environ[DATA_DIR_ENV])
        if self.data_dir is not None:
            return Path(self.data_dir)
        return Path("data") / self.dataset


_TOP_KEYS = {"dataset": str, "balance": str, "method": str, "ablation": str, "profile": str,
             "run_dir": Path, "data_dir": Path, "repeats": int, "train_final_generator": bool}
_WEIGHT_KEYS = {f.name: float for f in dataclasses.fields(LossWeights)}
_TRAIN_TYPES = {"classifier_batch": int, "generator_batch": int, "max_epochs": int, "patience_classifier": int,
                "patience_generator": int, "learning_rate": float, "generator_learning_rate": float,
                "adam_beta1": float, "adam_beta2": float,
                "replay_adjust": bool, "seed": int, "steps_per_generator_epoch": int,
                "generator_max_epochs": int, "gamma_focal": float, "min_delta": float, "model_preset": str,
                "max_per_class": int, "eval_batch": int}
_NULLABLE = {"generator_max_epochs", "generator_learning_rate", "max_per_class", "data_dir"}


def _convert(key: str, raw: str, kind, line: int):
    value = raw.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1]
    if key in _NULLABLE and value.lower() in ("none", "null", ""):
        return None
    try:
        if kind is bool:
            low = value.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is Path:
            return Path(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw.strip()!r} as {kind.__name__}", line) from None


def parse_text(text: str) -> ExperimentConfig:
    raw: dict[str, tuple[object, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, _, value = body.partition("=")
        key = key.strip()
        kind = _TOP_KEYS.get(key) or _TRAIN_TYPES.get(key) or _WEIGHT_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        raw[key] = (_convert(key, value, kind, lineno), lineno)
    return build_config({k: v for k, (v, _) in raw.items()}, {k: n for k, (_, n) in raw.items()})


def build_config(values: dict, lines: dict[str, int] | None = None) -> ExperimentConfig:
    lines = lines or {}

    def check(key, allowed):
        if key in values and values[key] not in allowed:
            raise ConfigError(f"{key} must be one of {', '.join(allowed)}, got {values[key]!r}", lines.get(key))

    check("dataset", DATASETS)
    check("balance", BALANCES)
    check("method", METHODS)
    check("ablation", tuple(ABLATIONS))
    check("profile", PROFILES)

    ablation = values.get("ablation", "ls_ce_feat_ra")
    weights, replay_adjust = ABLATIONS[ablation]
    weight_values = dataclasses.asdict(weights)
    for key in _WEIGHT_KEYS:
        if key in values:
            weight_values[key] = values[key]
    try:
        weights = LossWeights(**weight_values)
    except ValueError as exc:
        bad = next((k for k in _WEIGHT_KEYS if k in values and values[k] < 0), None)
        raise ConfigError(str(exc), lines.get(bad)) from None

    train_values = dict(DESK_PROFILE) if values.get("profile") == "desk" else {}
    train_values["replay_adjust"] = replay_adjust
    train_values.update({k: v for k, v in values.items() if k in _TRAIN_TYPES})
    try:
        train = TrainConfig(loss_weights=weights, **train_values)
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from None

    top = {k: v for k, v in values.items() if k in _TOP_KEYS}
    if "repeats" in top and top["repeats"] < 1:
        raise ConfigError("repeats must be >= 1", lines.get("repeats"))
    return ExperimentConfig(train=train, **top)


def parse_config(path: str | os.PathLike) -> ExperimentConfig:
    return parse_text(Path(path).read_text())


def serialize(config: ExperimentConfig) -> str:
    out = []
    for key in _TOP_KEYS:
        value = getattr(config, key)
        out.append(f"{key} = {'none' if value is None else value}")
    for key in _TRAIN_TYPES:
        value = getattr(config.train, key)
        out.append(f"{key} = {'none' if value is None else value}")
    for key in _WEIGHT_KEYS:
        out.append(f"{key} = {getattr(config.train.loss_weights, key)!r}")
    return "\n".join(out) + "\n"
