"""Losses for inverting a frozen classifier into an image generator.

Every term works on a :class:`GeneratedBatch`: generator images, the frozen
classifier's logits on them and (optionally) the per-BN-layer activation
statistics collected during that forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateBatchError, DimensionError

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))


@dataclass
class RecordingLossWeights:
    lambda1: float = 5.0
    lambda2: float = 20.0
    lambda3: float = 0.1
    pair_count: int = 200
    div_space: str = "output"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.pair_count < 1:
            raise ConfigurationError("pair_count must be >= 1")
        if self.div_space not in ("output", "pixel"):
            raise ConfigurationError(f"div_space must be 'output' or 'pixel', got {self.div_space!r}")


@dataclass
class GeneratedBatch:
    images: Optional[torch.Tensor]
    logits: torch.Tensor
    bn_stats: list = field(default_factory=list)

    def __post_init__(self):
        self.log_softmax = F.log_softmax(self.logits, dim=1)
        self.softmax = self.log_softmax.exp()
        self.pseudo_labels = self.softmax.argmax(dim=1)

    @classmethod
    def from_probabilities(cls, probs, images=None):
        probs = torch.as_tensor(probs, dtype=torch.float64)
        return cls(images, probs.log())

    def __len__(self):
        return self.logits.shape[0]


class BNStatCollector:
    """Records the per-channel mean and biased variance entering every BN layer.

    Use as a context manager around a forward pass; ``stats`` then holds one
    ``(mean, variance)`` pair per BN layer, in module order, still attached to
    the autograd graph.
    """

    def __init__(self, model: nn.Module):
        self.layers = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
        self.stats = [None] * len(self.layers)
        self._handles = []

    def _hook(self, idx):
        def fn(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            mean = x.mean(dim=dims)
            var = (x - mean.view(1, -1, *([1] * (x.dim() - 2)))).pow(2).mean(dim=dims)
            self.stats[idx] = (mean, var)
        return fn

    def __enter__(self):
        self.stats = [None] * len(self.layers)
        self._handles = [m.register_forward_hook(self._hook(i)) for i, m in enumerate(self.layers)]
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []
        return False


def one_hot_loss(batch: GeneratedBatch) -> torch.Tensor:
    """Mean cross-entropy between each softmax row and its own argmax one-hot."""
    logp = batch.log_softmax.clamp_min(LOG_FLOOR)
    return -logp.gather(1, batch.pseudo_labels[:, None]).mean()


def class_diversity_loss(batch: GeneratedBatch) -> torch.Tensor:
    """Negative entropy of the batch-mean softmax; -ln K when classes are balanced."""
    mean = batch.softmax.mean(dim=0)
    return (mean * mean.clamp_min(PROB_FLOOR).log()).sum()


def bn_alignment_loss(batch_stats, stored) -> torch.Tensor:
    if len(batch_stats) != len(stored):
        raise ConfigurationError(
            f"got statistics for {len(batch_stats)} BN layers but {len(stored)} stored layers"
        )
    if not stored:
        raise ConfigurationError("no BN layers to align")
    total = 0.0
    for i, ((mean, var), ref) in enumerate(zip(batch_stats, stored)):
        if mean.numel() != ref.channel_count or var.numel() != ref.channel_count:
            raise ConfigurationError(
                f"layer {i}: {mean.numel()} channels in batch vs {ref.channel_count} stored"
            )
        mu = ref.mean.to(mean)
        sig = ref.variance.to(var)
        total = total + torch.linalg.vector_norm(mean - mu) + torch.linalg.vector_norm(var - sig)
    return total


def sample_pairs(n: int, pair_count: int, rng: np.random.Generator):
    """``min(pair_count, n(n-1)/2)`` distinct unordered index pairs, uniformly without replacement."""
    if n < 2:
        raise DegenerateBatchError(f"pair sampling needs at least 2 samples, got {n}")
    total = n * (n - 1) // 2
    k = min(pair_count, total)
    flat = rng.choice(total, size=k, replace=False)
    first, second = np.triu_indices(n, 1)
    return first[flat], second[flat]


def soft_pixel_histogram(images: torch.Tensor, bins: int = 32, bandwidth: Optional[float] = None):
    """Per-image normalized pixel-value histogram with Gaussian kernels (differentiable)."""
    x = images.reshape(images.shape[0], -1, 1)
    centers = torch.linspace(-1.0, 1.0, bins, dtype=images.dtype, device=images.device)
    bw = bandwidth if bandwidth is not None else 2.0 / (bins - 1)
    w = torch.exp(-0.5 * ((x - centers) / bw) ** 2).sum(dim=1)
    return w / w.sum(dim=1, keepdim=True)


def symmetric_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    logp = p.clamp_min(PROB_FLOOR).log()
    logq = q.clamp_min(PROB_FLOOR).log()
    return ((p - q) * (logp - logq)).sum(dim=1)


def pair_diversity_loss(batch: GeneratedBatch, pair_count: int, rng: np.random.Generator,
                        space: str = "output") -> torch.Tensor:
    """Mean over sampled pairs of -(KL(p||q) + KL(q||p)) / 2."""
    first, second = sample_pairs(len(batch), pair_count, rng)
    if space == "output":
        dist = batch.softmax
    elif space == "pixel":
        if batch.images is None:
            raise DimensionError("pixel-space diversity needs the generated images")
        dist = soft_pixel_histogram(batch.images)
    else:
        raise ConfigurationError(f"unknown diversity space {space!r}")
    i = torch.as_tensor(first, device=dist.device)
    j = torch.as_tensor(second, device=dist.device)
    return -0.5 * symmetric_kl(dist[i], dist[j]).mean()


def recording_loss(batch: GeneratedBatch, stored, weights: RecordingLossWeights, rng: np.random.Generator):
    """Weighted Stage-I objective; returns ``(total, terms)`` with float terms for logging.

    The BN term needs ``batch.bn_stats``; it may be omitted only when ``lambda2`` is 0.
    """
    oh = one_hot_loss(batch)
    cd = class_diversity_loss(batch)
    if batch.bn_stats:
        bn = bn_alignment_loss(batch.bn_stats, stored)
    elif weights.lambda2 == 0:
        bn = torch.zeros((), dtype=oh.dtype, device=oh.device)
    else:
        raise ConfigurationError("lambda2 > 0 but the batch carries no BN statistics")
    div = pair_diversity_loss(batch, weights.pair_count, rng, weights.div_space)
    total = oh + weights.lambda1 * cd + weights.lambda2 * bn + weights.lambda3 * div
    terms = {
        "oh": oh.item(),
        "cd": cd.item(),
        "bn": bn.item(),
        "div": div.item(),
        "total": total.item(),
    }
    return total, terms
