"""Per-class statistics of the classifier's last-layer features.

These Gaussians stand in for the real data of earlier tasks: the generator's feature-map loss
compares generated features with a count-weighted merge of them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import UnknownClassError
from .losses import MomentPair


class StoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClassFeatureStats:
    label: int
    mean: np.ndarray
    variance: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance must have the same shape")
        if (self.variance < 0).any():
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class FeatureStatStore:
    feature_dim: int
    entries: dict[int, ClassFeatureStats] = field(default_factory=dict)

    def __post_init__(self):
        for label, e in self.entries.items():
            if e.label != label or e.mean.shape != (self.feature_dim,):
                raise ValueError(f"entry for class {label} does not match the store")

    @property
    def labels(self) -> list[int]:
        return sorted(self.entries)

    def __contains__(self, label) -> bool:
        return int(label) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def num_scalars(self) -> int:
        return 2 * self.feature_dim * len(self.entries)

    def updated(self, other: "FeatureStatStore") -> "FeatureStatStore":
        """Copy of this store with ``other``'s classes added or replaced."""
        if self.entries and other.entries and other.feature_dim != self.feature_dim:
            raise ValueError("feature dims differ")
        dim = other.feature_dim if other.entries or not self.entries else self.feature_dim
        return FeatureStatStore(dim, {**self.entries, **other.entries})


class FeatureStatBuilder:
    """Streaming per-class mean/variance (Chan et al. batch merge of Welford accumulators).

    Only running moments are kept, never the features themselves.
    """

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self._n: dict[int, int] = {}
        self._mean: dict[int, np.ndarray] = {}
        self._m2: dict[int, np.ndarray] = {}

    def accumulate(self, features, labels) -> "FeatureStatBuilder":
        features = _as_numpy(features).astype(np.float64)
        labels = _as_numpy(labels).astype(np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ValueError(f"expected (n, {self.feature_dim}) features, got {features.shape}")
        if len(features) != len(labels):
            raise ValueError("features and labels differ in length")
        for label in np.unique(labels):
            x = features[labels == label]
            nb = len(x)
            mb = x.mean(axis=0)
            m2b = ((x - mb) ** 2).sum(axis=0)
            c = int(label)
            if c not in self._n:
                self._n[c], self._mean[c], self._m2[c] = nb, mb, m2b
                continue
            na = self._n[c]
            n = na + nb
            delta = mb - self._mean[c]
            self._mean[c] = self._mean[c] + delta * (nb / n)
            self._m2[c] = self._m2[c] + m2b + delta ** 2 * (na * nb / n)
            self._n[c] = n
        return self

    def finalize(self) -> FeatureStatStore:
        entries = {}
        for c in sorted(self._n):
            var = np.maximum(self._m2[c] / self._n[c], 0.0)
            entries[c] = ClassFeatureStats(c, self._mean[c].astype(np.float32), var.astype(np.float32), self._n[c])
        return FeatureStatStore(self.feature_dim, entries)


def accumulate(builder: FeatureStatBuilder, features, labels) -> FeatureStatBuilder:
    return builder.accumulate(features, labels)


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def merge_moments(batch_labels, store: FeatureStatStore) -> MomentPair:
    """Merge the stored class Gaussians, weighted by each class's count in this batch."""
    labels = _as_numpy(batch_labels).astype(np.int64).reshape(-1)
    if len(labels) == 0:
        raise ValueError("cannot merge moments for an empty batch")
    classes, counts = np.unique(labels, return_counts=True)
    missing = [int(c) for c in classes if int(c) not in store.entries]
    if missing:
        raise UnknownClassError(f"no stored feature statistics for classes {missing}")
    w = counts.astype(np.float64) / counts.sum()
    mu = np.stack([store.entries[int(c)].mean for c in classes]).astype(np.float64)
    var = np.stack([store.entries[int(c)].variance for c in classes]).astype(np.float64)
    mu_m = w @ mu
    var_m = np.maximum(w @ (var + mu ** 2) - mu_m ** 2, 0.0)
    return MomentPair(torch.from_numpy(mu_m.astype(np.float32)), torch.from_numpy(var_m.astype(np.float32)))


# -- persistence: <name>.bin (little-endian float32: mean then variance per class) + <name>.manifest.txt

def save_store(store: FeatureStatStore, directory: str | os.PathLike, name: str = "feature_stats") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"feature_dim\t{store.feature_dim}", f"classes\t{len(store)}"]
    with open(directory / f"{name}.bin", "wb") as fh:
        offset = 0
        for label in store.labels:
            e = store.entries[label]
            fh.write(np.ascontiguousarray(e.mean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(e.variance, dtype="<f4").tobytes())
            lines.append(f"class\t{label}\t{e.count}\t{offset}")
            offset += 8 * store.feature_dim
    (directory / f"{name}.manifest.txt").write_text("\n".join(lines) + "\n")
    return directory / f"{name}.bin"


def load_store(directory: str | os.PathLike, name: str = "feature_stats") -> FeatureStatStore:
    directory = Path(directory)
    try:
        blob = (directory / f"{name}.bin").read_bytes()
        lines = (directory / f"{name}.manifest.txt").read_text().splitlines()
        header = dict(line.split("\t", 1) for line in lines[:2])
        dim, n_classes = int(header["feature_dim"]), int(header["classes"])
        rows = [line.split("\t") for line in lines[2:] if line.strip()]
    except (OSError, ValueError, KeyError) as exc:
        raise StoreFormatError(f"cannot read feature store {name!r} in {directory}: {exc}") from exc
    if len(rows) != n_classes or len(blob) != 8 * dim * n_classes:
        raise StoreFormatError(f"feature store {name!r}: manifest and payload disagree")
    entries = {}
    for tag, label, count, offset in rows:
        if tag != "class":
            raise StoreFormatError(f"unexpected manifest row {tag!r}")
        start = int(offset)
        mean = np.frombuffer(blob, "<f4", dim, start).astype(np.float32)
        var = np.frombuffer(blob, "<f4", dim, start + 4 * dim).astype(np.float32)
        entries[int(label)] = ClassFeatureStats(int(label), mean, var, int(count))
    return FeatureStatStore(dim, entries)
