"""Classifier and conditional generator, BN snapshots and the checkpoint format."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ImageBatch, ShapeError, UnknownClassError

# width/depth presets; "full" lands near the reference budget (19.6M classifier, 3.2M generator),
# "desk" is small enough for single-core CPU experiments
CLASSIFIER_PRESETS = {
    "full": dict(widths=(64, 128, 256, 704), blocks=(2, 2, 2, 2), feature_dim=2048),
    "desk": dict(widths=(8, 16, 32, 64), blocks=(1, 1, 1, 1), feature_dim=None),
    "tiny": dict(widths=(4, 8), blocks=(1, 1), feature_dim=None),
}
GENERATOR_PRESETS = {
    "full": dict(channels=192, embed_dim=128),
    "desk": dict(channels=(32, 32, 16, 8), embed_dim=32),
    "tiny": dict(channels=(8, 8, 8, 8), embed_dim=8),
}


class CapturingBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that can record the per-channel mean and population variance of its input."""

    capture = False
    captured: tuple[torch.Tensor, torch.Tensor] | None = None

    def forward(self, x):
        if self.capture:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            self.captured = (mean, var)
        return super().forward(x)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = CapturingBatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = CapturingBatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), CapturingBatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


@dataclass
class ClassifierOutput:
    logits: torch.Tensor
    features: torch.Tensor
    batch_bn: list[tuple[torch.Tensor, torch.Tensor]] | None = None

    def __iter__(self):
        return iter((self.logits, self.features, self.batch_bn))


class ResNetClassifier(nn.Module):
    """Residual CNN for 1x32x32 inputs; every conv is followed by BN.

    The pooled activations in front of the linear head are returned as ``features``.
    With ``feature_dim`` set, a 1x1 conv + BN + ReLU widens the last stage to that size first.
    """

    def __init__(self, num_classes: int = 10, widths: Sequence[int] = (64, 128, 256, 704),
                 blocks: Sequence[int] = (2, 2, 2, 2), feature_dim: int | None = 2048, in_channels: int = 1):
        super().__init__()
        self.num_classes = num_classes
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
                                  CapturingBatchNorm2d(widths[0]), nn.ReLU(inplace=True))
        stages, cin = [], widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            layers = []
            for j in range(n):
                layers.append(BasicBlock(cin, w, 2 if (j == 0 and i > 0) else 1))
                cin = w
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)
        self.expand = None
        if feature_dim is not None:
            self.expand = nn.Sequential(nn.Conv2d(cin, feature_dim, 1, bias=False),
                                        CapturingBatchNorm2d(feature_dim), nn.ReLU(inplace=True))
            cin = feature_dim
        self.feature_dim = cin
        self.fc = nn.Linear(cin, num_classes)

    @property
    def bn_layers(self) -> list[CapturingBatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, CapturingBatchNorm2d)]

    def forward(self, x: torch.Tensor, capture_bn: bool = False) -> ClassifierOutput:
        if x.ndim != 4 or x.shape[1] != self.stem[0].in_channels:
            raise ShapeError(f"expected (n, {self.stem[0].in_channels}, H, W) input, got {tuple(x.shape)}")
        bns = self.bn_layers
        for bn in bns:
            bn.capture = capture_bn
            bn.captured = None
        h = self.stages(self.stem(x))
        if self.expand is not None:
            h = self.expand(h)
        features = torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)
        logits = self.fc(features)
        batch_bn = None
        if capture_bn:
            batch_bn = [bn.captured for bn in bns]
            for bn in bns:
                bn.capture = False
                bn.captured = None
        return ClassifierOutput(logits, features, batch_bn)


def build_classifier(preset: str = "full", num_classes: int = 10) -> ResNetClassifier:
    return ResNetClassifier(num_classes=num_classes, **CLASSIFIER_PRESETS[preset])


def classifier_forward(model: ResNetClassifier, batch: ImageBatch | torch.Tensor,
                       capture_bn: bool = False) -> ClassifierOutput:
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    return model(pixels, capture_bn=capture_bn)


# -- generator ------------------------------------------------------------------------------------

class ConditionalBatchNorm2d(nn.Module):
    """Batch statistics only (no running buffers); gain and bias are projected from the class embedding."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False, track_running_stats=False)
        self.gain = nn.Linear(embed_dim, channels)
        self.bias = nn.Linear(embed_dim, channels)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.gain.bias)
        nn.init.zeros_(self.bias.weight)
        nn.init.zeros_(self.bias.bias)

    def forward(self, x, emb):
        g = 1.0 + self.gain(emb)
        b = self.bias(emb)
        return self.bn(x) * g[:, :, None, None] + b[:, :, None, None]


class GBlock(nn.Module):
    def __init__(self, cin: int, cout: int, embed_dim: int):
        super().__init__()
        self.bn1 = ConditionalBatchNorm2d(cin, embed_dim)
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.bn2 = ConditionalBatchNorm2d(cout, embed_dim)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x, emb):
        h = F.relu(self.bn1(x, emb))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, emb)))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionalGenerator(nn.Module):
    """Class-conditional residual upsampler, 4x4 -> 32x32, tanh output.

    ``channels`` is either one width for every resolution or four widths (4x4, 8x8, 16x16, 32x32).
    """

    def __init__(self, num_classes: int = 10, noise_dim: int = 128, channels: int | Sequence[int] = 192,
                 embed_dim: int = 128, out_channels: int = 1):
        super().__init__()
        widths = (channels,) * 4 if isinstance(channels, int) else tuple(channels)
        if len(widths) != 4:
            raise ValueError("channels needs one width per resolution (4 values)")
        self.num_classes = num_classes
        self.noise_dim = noise_dim
        self.widths = widths
        self.embed = nn.Embedding(num_classes, embed_dim)
        self.linear = nn.Linear(noise_dim + embed_dim, 4 * 4 * widths[0])
        self.blocks = nn.ModuleList([GBlock(widths[i], widths[i + 1], embed_dim) for i in range(3)])
        self.out_bn = nn.BatchNorm2d(widths[-1], track_running_stats=False)
        self.out_conv = nn.Conv2d(widths[-1], out_channels, 3, 1, 1)
        self.register_buffer("trained_mask", torch.zeros(num_classes, dtype=torch.bool))

    @property
    def trained_classes(self) -> list[int]:
        return torch.nonzero(self.trained_mask).flatten().tolist()

    def set_trained_classes(self, classes: Iterable[int]) -> None:
        self.trained_mask.zero_()
        self.trained_mask[list(classes)] = True

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        emb = self.embed(labels)
        h = self.linear(torch.cat([z, emb], dim=1)).view(-1, self.widths[0], 4, 4)
        for block in self.blocks:
            h = block(h, emb)
        return torch.tanh(self.out_conv(F.relu(self.out_bn(h))))


def build_generator(preset: str = "full", num_classes: int = 10, noise_dim: int = 128) -> ConditionalGenerator:
    return ConditionalGenerator(num_classes=num_classes, noise_dim=noise_dim, **GENERATOR_PRESETS[preset])


def sample_noise(n: int, noise_dim: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, noise_dim, generator=gen)


def generate(model: ConditionalGenerator, labels, seed: int, grad: bool = False) -> ImageBatch:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if len(labels) == 0:
        return ImageBatch(torch.empty(0, 1, 32, 32), labels)
    trained = set(model.trained_classes)
    unknown = sorted(set(labels.tolist()) - trained) if trained else []
    if unknown:
        raise UnknownClassError(f"generator was not trained on classes {unknown}")
    z = sample_noise(len(labels), model.noise_dim, seed)
    with torch.set_grad_enabled(grad):
        pixels = model(z, labels)
    return ImageBatch(pixels, labels)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# -- BN snapshots -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class BNSnapshot:
    layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]

    def __len__(self) -> int:
        return len(self.layers)

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, (m, v) in enumerate(self.layers):
            out[f"bn.{i}.running_mean"] = m
            out[f"bn.{i}.running_var"] = v
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, torch.Tensor]) -> "BNSnapshot":
        n = len(state) // 2
        return cls(tuple((state[f"bn.{i}.running_mean"], state[f"bn.{i}.running_var"]) for i in range(n)))


def snapshot_bn(model: nn.Module) -> BNSnapshot:
    layers = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d) and m.track_running_stats]
    if not layers:
        raise ValueError("model has no batch-norm layers with running statistics")
    return BNSnapshot(tuple((bn.running_mean.detach().clone(), bn.running_var.detach().clone()) for bn in layers))


# -- checkpoint format ------------------------------------------------------------------------------
# <name>.bin holds every array back to back as little-endian float32 (row-major);
# <name>.manifest.txt has one "name<TAB>shape<TAB>offset<TAB>dtype" line per array.

def save_arrays(arrays: dict[str, torch.Tensor | np.ndarray], directory: str | os.PathLike, name: str,
                meta: dict[str, str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines, offset = [], 0
    if meta:
        lines.extend(f"# {k}={v}" for k, v in meta.items())
    with open(directory / f"{name}.bin", "wb") as fh:
        for key, value in arrays.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            dtype = str(arr.dtype)
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(raw)
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"{key}\t{shape}\t{offset}\t{dtype}")
            offset += len(raw)
    (directory / f"{name}.manifest.txt").write_text("\n".join(lines) + "\n")
    return directory / f"{name}.bin"


def load_arrays(directory: str | os.PathLike, name: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    blob = (directory / f"{name}.bin").read_bytes()
    arrays, meta = {}, {}
    for line in (directory / f"{name}.manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
            continue
        key, shape, offset, dtype = line.split("\t")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        count = int(np.prod(dims)) if dims else 1
        start = int(offset)
        if start + 4 * count > len(blob):
            raise ValueError(f"checkpoint {name}: array {key} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(dims)
        arrays[key] = arr.astype(dtype)
    return arrays, meta


def save_checkpoint(model: nn.Module, directory: str | os.PathLike, name: str,
                    meta: dict[str, str] | None = None) -> Path:
    return save_arrays(model.state_dict(), directory, name, meta)


def load_checkpoint(model: nn.Module, directory: str | os.PathLike, name: str) -> nn.Module:
    arrays, _ = load_arrays(directory, name)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return model


def save_snapshot(snapshot: BNSnapshot, directory: str | os.PathLike, name: str = "bn_snapshot") -> Path:
    return save_arrays(snapshot.state_dict(), directory, name)


def load_snapshot(directory: str | os.PathLike, name: str = "bn_snapshot") -> BNSnapshot:
    arrays, _ = load_arrays(directory, name)
    return BNSnapshot.from_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
