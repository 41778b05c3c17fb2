"""Replay label sampling with loss-driven re-weighting, and the real/replay mixing ratio."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

TINY = 1e-12
DEFAULT_DECAY = 0.9


@dataclass(frozen=True)
class ReplayState:
    classes: tuple[int, ...]
    ema_loss: tuple[float, ...]
    probs: tuple[float, ...]
    decay: float = DEFAULT_DECAY
    floor: float = 0.0

    def prob_of(self, label: int) -> float:
        return self.probs[self.classes.index(label)]

    def as_record(self) -> dict:
        return {"classes": list(self.classes), "probs": [round(p, 6) for p in self.probs],
                "ema_loss": [round(v, 6) for v in self.ema_loss]}


def init_replay(previous_classes: Iterable[int], decay: float = DEFAULT_DECAY,
                floor: float | None = None) -> ReplayState:
    """Uniform start; the default floor is half the uniform probability."""
    classes = tuple(int(c) for c in previous_classes)
    if not classes:
        raise ValueError("replay needs at least one previous class")
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate classes")
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    k = len(classes)
    floor = 0.5 / k if floor is None else float(floor)
    if floor < 0 or floor * k > 1.0 + 1e-12:
        raise ValueError(f"floor {floor} is infeasible for {k} classes")
    return ReplayState(classes, (0.0,) * k, (1.0 / k,) * k, decay, floor)


def floored_normalize(weights: np.ndarray, floor: float) -> np.ndarray:
    """Return p with p_i = max(floor, t * w_i) and sum(p) = 1.

    This is clamping at ``floor`` followed by renormalisation, iterated to a fixed point; it keeps the
    order of ``weights`` and never lets an entry drop below the floor.
    """
    w = np.maximum(np.asarray(weights, dtype=np.float64), TINY)
    k = len(w)
    if floor <= 0:
        return w / w.sum()
    if floor * k >= 1.0:
        return np.full(k, 1.0 / k)
    clamped = np.zeros(k, dtype=bool)
    while True:
        free = ~clamped
        scale = (1.0 - floor * clamped.sum()) / w[free].sum()
        newly = free & (w * scale < floor)
        if not newly.any():
            break
        clamped |= newly
    p = np.where(clamped, floor, w * scale)
    return p / p.sum()


def sample_labels(state: ReplayState, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    p = np.asarray(state.probs, dtype=np.float64)
    return np.asarray(state.classes, dtype=np.int64)[rng.choice(len(p), size=n, p=p / p.sum())]


def update_state(state: ReplayState, per_sample_losses, labels) -> ReplayState:
    losses = np.asarray(per_sample_losses, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(losses) != len(labels):
        raise ValueError("losses and labels differ in length")
    if (losses < 0).any():
        raise ValueError("losses must be non-negative")
    unknown = set(labels.tolist()) - set(state.classes)
    if unknown:
        raise KeyError(f"labels {sorted(unknown)} are not replayed classes")
    ema = np.asarray(state.ema_loss, dtype=np.float64)
    for i, c in enumerate(state.classes):
        mask = labels == c
        if mask.any():
            ema[i] = state.decay * ema[i] + (1.0 - state.decay) * losses[mask].mean()
    probs = floored_normalize(ema, state.floor)
    return replace(state, ema_loss=tuple(ema.tolist()), probs=tuple(probs.tolist()))


def mixing_ratio(previous_classes: Iterable[int], current_classes: Iterable[int]) -> float:
    prev, cur = set(previous_classes), set(current_classes)
    if not prev and not cur:
        raise ValueError("both class sets are empty")
    if prev & cur:
        raise ValueError(f"class sets overlap: {sorted(prev & cur)}")
    return len(prev) / (len(prev) + len(cur))
