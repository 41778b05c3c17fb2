"""Generator and classifier losses.

Everything here is a pure function of tensors, differentiable wherever autograd can reach.
Batch variances are population (biased) variances, matching batch-norm's own convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .models import BNSnapshot

KL_CLAMP = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the generator's total loss."""

    delta: float = 1.0  # cross-entropy
    alpha: float = 1.0  # feature-map statistics
    beta: float = 1.0  # BN statistics
    gamma_div: float = 1.0  # sample diversification
    epsilon: float = 1.0  # image smoothing

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


# ablation presets: name -> (weights, replay_adjust)
ABLATIONS: dict[str, tuple[LossWeights, bool]] = {
    "ls": (LossWeights(delta=0, alpha=0), False),
    "ls_feat": (LossWeights(delta=0, alpha=1), False),
    "ls_ce": (LossWeights(delta=1, alpha=0), False),
    "ls_ce_feat": (LossWeights(delta=1, alpha=1), False),
    "ls_ra": (LossWeights(delta=0, alpha=0), True),
    "ls_feat_ra": (LossWeights(delta=0, alpha=1), True),
    "ls_ce_ra": (LossWeights(delta=1, alpha=0), True),
    "ls_ce_feat_ra": (LossWeights(delta=1, alpha=1), True),
}

ABLATION_LABELS = {
    "ls": "l_s",
    "ls_feat": "l_s + l_feat",
    "ls_ce": "l_s + l_ce",
    "ls_ce_feat": "l_s + l_ce + l_feat",
    "ls_ra": "l_s + ra",
    "ls_feat_ra": "l_s + l_feat + ra",
    "ls_ce_ra": "l_s + l_ce + ra",
    "ls_ce_feat_ra": "l_s + l_ce + l_feat + ra",
}


class MomentPair(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor


class GeneratorLossParts(NamedTuple):
    ce: torch.Tensor
    feat: torch.Tensor
    bn: torch.Tensor
    div: torch.Tensor
    sm: torch.Tensor


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.ndim != 2 or labels.ndim != 1 or len(labels) != len(logits):
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not line up")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"labels must lie in [0, {logits.shape[1]})")


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        return values.sum()
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check_labels(logits, labels)
    log_p = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return _reduce(-log_p, reduction)


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma_focal: float = 2.0,
               reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy scaled per sample by ``(1 - p_y) ** gamma_focal``."""
    if gamma_focal < 0:
        raise ValueError("gamma_focal must be >= 0")
    _check_labels(logits, labels)
    log_p = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    # 1 - exp(log_p) loses precision near p = 1; -expm1 does not
    weight = (-torch.expm1(log_p)).clamp_min(0.0) ** gamma_focal
    return _reduce(-weight * log_p, reduction)


def bn_stat_loss(batch_bn: Sequence[tuple[torch.Tensor, torch.Tensor]], snapshot: BNSnapshot) -> torch.Tensor:
    if len(batch_bn) != len(snapshot.layers):
        raise ValueError(f"{len(batch_bn)} captured layers vs {len(snapshot.layers)} in the snapshot")
    total_mean = total_var = 0.0
    for (mu, var), (mu_bn, var_bn) in zip(batch_bn, snapshot.layers):
        if mu.shape != mu_bn.shape or var.shape != var_bn.shape:
            raise ValueError(f"BN layer shape mismatch: {tuple(mu.shape)} vs {tuple(mu_bn.shape)}")
        total_mean = total_mean + torch.linalg.vector_norm(mu - mu_bn)
        total_var = total_var + torch.linalg.vector_norm(var - var_bn)
    return torch.as_tensor(total_mean + total_var)


def feature_map_loss(batch_features: torch.Tensor, merged: MomentPair) -> torch.Tensor:
    if batch_features.ndim != 2 or batch_features.shape[0] < 1:
        raise ValueError(f"expected (n >= 1, F) features, got {tuple(batch_features.shape)}")
    if batch_features.shape[1] != merged.mean.shape[-1] or merged.mean.shape != merged.variance.shape:
        raise ValueError(f"feature dim {batch_features.shape[1]} does not match merged moments "
                         f"{tuple(merged.mean.shape)}")
    mu = batch_features.mean(dim=0)
    var = batch_features.var(dim=0, unbiased=False)
    target_mu = merged.mean.to(batch_features)
    target_var = merged.variance.to(batch_features)
    return torch.linalg.vector_norm(mu - target_mu) + torch.linalg.vector_norm(var - target_var)


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (p * (p.log() - q.log())).sum()


def diversity_loss(probs_a: torch.Tensor, probs_b: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Negated symmetric KL between the mean class distributions of two sub-samples (always <= 0).

    Minimising it pushes the two sub-samples apart.
    """
    if validate:
        for name, p in (("probs_a", probs_a), ("probs_b", probs_b)):
            d = p.detach()
            if d.ndim != 2 or (d < 0).any() or not torch.allclose(d.sum(1), torch.ones_like(d[:, 0]), atol=1e-5):
                raise ValueError(f"{name} rows must be probability vectors")
    s1 = probs_a.mean(dim=0).clamp_min(KL_CLAMP)
    s2 = probs_b.mean(dim=0).clamp_min(KL_CLAMP)
    return -0.5 * (_kl(s1, s2) + _kl(s2, s1))


def split_for_diversity(batch_indices, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Halve the batch, then draw 2/3 of each half without replacement."""
    idx = np.asarray(batch_indices)
    if idx.ndim == 0:
        idx = np.arange(int(idx))
    n = len(idx)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split for diversity, got {n}")
    half = n // 2
    first, second = idx[:half], idx[half:]
    k = (half * 2) // 3
    rng = np.random.default_rng(seed)
    return (np.sort(rng.choice(first, size=k, replace=False)),
            np.sort(rng.choice(second, size=k, replace=False)))


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = torch.outer(g, g)
    return k / k.sum()


def gaussian_blur(images: torch.Tensor, size: int = 3, sigma: float = 1.0) -> torch.Tensor:
    c = images.shape[1]
    kernel = gaussian_kernel(size, sigma).to(images).expand(c, 1, size, size)
    pad = size // 2
    return F.conv2d(F.pad(images, (pad, pad, pad, pad), mode="reflect"), kernel, groups=c)


def smoothing_loss(images: torch.Tensor) -> torch.Tensor:
    if images.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) images, got {tuple(images.shape)}")
    return F.mse_loss(images, gaussian_blur(images))


def standard_loss(images: torch.Tensor, batch_bn, snapshot: BNSnapshot,
                  probs_a: torch.Tensor, probs_b: torch.Tensor) -> torch.Tensor:
    return smoothing_loss(images) + diversity_loss(probs_a, probs_b) + bn_stat_loss(batch_bn, snapshot)


def total_generator_loss(weights: LossWeights, parts: GeneratorLossParts | Sequence) -> torch.Tensor:
    ce, feat, bn, div, sm = parts
    return (weights.delta * ce + weights.alpha * feat + weights.beta * bn
            + weights.gamma_div * div + weights.epsilon * sm)


def total_classifier_loss(fl_real, ce_replay, m: float):
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {m}")
    return (1.0 - m) * fl_real + m * ce_replay
