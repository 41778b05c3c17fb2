"""IDX ingestion, preprocessing, task schedules and batch iteration.

Splits are plain numpy containers. Raw splits hold ``(N, 28, 28)`` uint8
images straight from the IDX files; :func:`preprocess` turns them into
``(N, 1, 32, 32)`` float32 images in ``[-1, 1]``.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10
IMAGE_SIZE = 32

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXFormatError(ValueError):
    """Bad magic number or malformed header."""


class IDXLengthError(IDXFormatError):
    """Payload shorter (or longer) than the header promises."""


class ConsistencyError(ValueError):
    """Image and label files disagree."""


class UnknownClassError(KeyError):
    pass


class ShapeError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor  # (n, 1, 32, 32) float32 in [-1, 1]
    labels: torch.Tensor  # (n,) int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class ClassSpec:
    label: int
    fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction for class {self.label} must be in (0, 1], got {self.fraction}")


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[tuple[ClassSpec, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for i, task in enumerate(self.tasks):
            labels = [c.label for c in task]
            if len(set(labels)) != len(labels):
                raise ValueError(f"task {i} lists a class twice: {labels}")
            overlap = seen.intersection(labels)
            if overlap:
                raise ValueError(f"classes {sorted(overlap)} appear in more than one task")
            seen.update(labels)

    @classmethod
    def from_lists(cls, tasks: Sequence[Mapping[int, float] | Sequence[int]]) -> "TaskSchedule":
        built = []
        for task in tasks:
            if isinstance(task, Mapping):
                built.append(tuple(ClassSpec(int(k), float(v)) for k, v in task.items()))
            else:
                built.append(tuple(ClassSpec(int(k)) for k in task))
        return cls(tuple(built))

    def task_labels(self, index: int) -> list[int]:
        return [c.label for c in self.tasks[index]]

    def all_labels(self) -> list[int]:
        return [c.label for task in self.tasks for c in task]

    def __len__(self) -> int:
        return len(self.tasks)

    def digest(self) -> str:
        text = ";".join(",".join(f"{c.label}:{c.fraction}" for c in t) for t in self.tasks)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


BALANCED_SCHEDULE = TaskSchedule.from_lists([[3, 4, 9], [5, 6, 0], [1, 2, 8, 7]])
IMBALANCED_SCHEDULE = TaskSchedule.from_lists([
    {3: 1.0, 4: 0.6, 9: 0.3},
    {5: 0.9, 6: 0.4, 0: 0.2},
    {1: 0.5, 2: 0.7, 8: 0.1, 7: 0.8},
])


@dataclass(frozen=True)
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    # positions in the split this one was carved from; used to prove tasks are disjoint
    source_index: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def per_class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class_counts)

    def subset(self, index: np.ndarray) -> "DatasetSplit":
        index = np.asarray(index, dtype=np.int64)
        base = self.source_index if self.source_index is not None else np.arange(len(self))
        return DatasetSplit(self.images[index], self.labels[index], base[index])

    def restrict(self, classes: Sequence[int]) -> "DatasetSplit":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))


def _open(path: str | os.PathLike):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def parse_idx(blob: bytes, expected_magic: int) -> np.ndarray:
    """Decode an in-memory IDX blob of unsigned bytes."""
    if len(blob) < 4:
        raise IDXLengthError(f"IDX blob too short for a header ({len(blob)} bytes)")
    (magic,) = struct.unpack(">i", blob[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IDXLengthError("truncated IDX header")
    dims = struct.unpack(f">{ndim}i", blob[4:header])
    size = int(np.prod(dims))
    payload = len(blob) - header
    if payload != size:
        raise IDXLengthError(f"payload is {payload} bytes, header promises {size}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims).copy()


def encode_idx(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">i{array.ndim}i", magic, *array.shape) + array.tobytes()


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike) -> DatasetSplit:
    with _open(images_path) as fh:
        images = parse_idx(fh.read(), IMAGE_MAGIC)
    with _open(labels_path) as fh:
        labels = parse_idx(fh.read(), LABEL_MAGIC)
    if images.ndim != 3:
        raise IDXFormatError(f"image file must be 3-d, got {images.ndim}-d")
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images vs {len(labels)} labels")
    if labels.size and labels.max() >= NUM_CLASSES:
        raise IDXFormatError(f"label {labels.max()} outside [0, {NUM_CLASSES})")
    return DatasetSplit(images, labels.astype(np.int64))


def load_dataset_dir(data_dir: str | os.PathLike, part: str = "train") -> DatasetSplit:
    images_name, labels_name = IDX_FILES[part]
    data_dir = Path(data_dir)
    return load_idx(data_dir / images_name, data_dir / labels_name)


def preprocess(split: DatasetSplit) -> DatasetSplit:
    """Bilinear 28x28 -> 32x32 resize, then map [0, 255] onto [-1, 1]."""
    if split.images.ndim != 3 or split.images.shape[1:] != (28, 28):
        raise ShapeError(f"expected (N, 28, 28) images, got {split.images.shape}")
    out = np.empty((len(split), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for start in range(0, len(split), 4096):
        chunk = torch.from_numpy(split.images[start:start + 4096].astype(np.float32)).unsqueeze(1)
        chunk = F.interpolate(chunk, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear", align_corners=False)
        out[start:start + len(chunk)] = (chunk * (2.0 / 255.0) - 1.0).clamp_(-1.0, 1.0).numpy()
    return DatasetSplit(out, split.labels.copy(), split.source_index)


def cap_per_class(split: DatasetSplit, limit: int, seed: int) -> DatasetSplit:
    """Keep at most ``limit`` images of every class (seeded shuffle + prefix)."""
    rng = np.random.default_rng(seed)
    keep = []
    for label in split.classes:
        idx = np.flatnonzero(split.labels == label)
        keep.append(np.sort(rng.permutation(idx)[:limit]))
    return split.subset(np.sort(np.concatenate(keep)))


def apply_schedule(split: DatasetSplit, schedule: TaskSchedule, seed: int) -> list[DatasetSplit]:
    counts = split.per_class_counts
    missing = [c for c in schedule.all_labels() if c not in counts]
    if missing:
        raise UnknownClassError(f"schedule uses classes absent from the split: {missing}")
    out = []
    for task in schedule.tasks:
        chosen = []
        for spec in task:
            idx = np.flatnonzero(split.labels == spec.label)
            # one generator per class so a class's selection does not depend on its task position
            rng = np.random.default_rng([seed, spec.label])
            n = int(np.floor(spec.fraction * len(idx) + 1e-9))
            chosen.append(rng.permutation(idx)[:n])
        out.append(split.subset(np.sort(np.concatenate(chosen))))
    return out


def iterate_batches(split: DatasetSplit, batch_size: int, seed: int) -> Iterator[ImageBatch]:
    """One epoch over ``split`` in seeded shuffled order; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(split) == 0:
        raise EmptySplitError("cannot iterate an empty split")
    order = np.random.default_rng(seed).permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ImageBatch(torch.from_numpy(np.ascontiguousarray(split.images[idx])),
                         torch.from_numpy(split.labels[idx]))


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# -- on-disk cache of preprocessed splits ---------------------------------------------------------

def save_split_cache(split: DatasetSplit, directory: str | os.PathLike, name: str, *, seed: int = 0,
                     schedule: TaskSchedule | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / f"{name}.npz", images=split.images, labels=split.labels)
    manifest = {
        "dataset": name,
        "seed": seed,
        "schedule_hash": schedule.digest() if schedule is not None else None,
        "n": len(split),
        "shape": list(split.images.shape),
        "per_class_counts": {str(k): v for k, v in split.per_class_counts.items()},
    }
    (directory / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory / f"{name}.npz"


def load_split_cache(directory: str | os.PathLike, name: str) -> DatasetSplit | None:
    path = Path(directory) / f"{name}.npz"
    if not path.exists():
        return None
    with np.load(path) as data:
        return DatasetSplit(data["images"], data["labels"])


def load_prepared(data_dir: str | os.PathLike, part: str, cache_dir: str | os.PathLike | None = None) -> DatasetSplit:
    """Load a preprocessed split, using (and filling) the cache when one is configured."""
    if cache_dir is not None:
        cached = load_split_cache(cache_dir, part)
        if cached is not None:
            return cached
    split = preprocess(load_dataset_dir(data_dir, part))
    if cache_dir is not None:
        save_split_cache(split, cache_dir, part)
    return split
