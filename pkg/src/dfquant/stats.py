"""Per-class batch-norm statistics, the EMA centroid bank and feature metrics.

Layer indices are 0-based positions in the classifier's ``bn_layers``; the
"semantic" layers are ``l_st .. L-1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch

from .modelkit.bn import channel_stats

Key = tuple[int, int]


def default_start_layer(num_layers: int) -> int:
    """First layer of the last third of the network."""
    return num_layers - math.ceil(num_layers / 3)


@dataclass
class ClassStat:
    mean: torch.Tensor
    std: torch.Tensor
    count: int


@dataclass
class ClassBatchStats:
    entries: dict[Key, ClassStat]
    l_st: int
    num_layers: int

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> ClassStat:
        return self.entries[key]

    def keys(self):
        return self.entries.keys()

    def detached(self) -> "ClassBatchStats":
        return ClassBatchStats(
            {k: ClassStat(v.mean.detach(), v.std.detach(), v.count) for k, v in self.entries.items()},
            self.l_st, self.num_layers,
        )


def _features(tap):
    return getattr(tap, "features", tap)


def class_batch_stats(taps, pseudo_labels: torch.Tensor, teacher_logits: torch.Tensor | None,
                      l_st: int) -> ClassBatchStats:
    """Per-(layer, class) channel mean/std over samples the teacher classifies as their pseudo-label.

    Misclassified samples are dropped; (layer, class) pairs left with fewer
    than two samples get no entry.
    """
    if teacher_logits is None:
        raise ValueError("teacher logits are required to filter misclassified samples")
    num_layers = len(taps)
    if not 0 <= l_st < num_layers:
        raise ValueError(f"l_st={l_st} outside [0, {num_layers})")
    labels = torch.as_tensor(pseudo_labels)
    correct = teacher_logits.detach().argmax(dim=1) == labels
    entries = {}
    for c in torch.unique(labels).tolist():
        mask = correct & (labels == c)
        n = int(mask.sum())
        if n < 2:
            continue
        for l in range(l_st, num_layers):
            mean, std = channel_stats(_features(taps[l])[mask])
            entries[(l, c)] = ClassStat(mean, std, n)
    return ClassBatchStats(entries, l_st, num_layers)


@dataclass
class CentroidBank:
    num_layers: int
    num_classes: int
    l_st: int
    beta_fd: float = 0.2
    mu: dict[Key, torch.Tensor] = field(default_factory=dict)
    sigma: dict[Key, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.beta_fd <= 1.0:
            raise ValueError(f"beta_fd must lie in [0, 1], got {self.beta_fd}")
        if not 0 <= self.l_st < self.num_layers:
            raise ValueError(f"l_st={self.l_st} outside [0, {self.num_layers})")

    def initialized(self, key: Key) -> bool:
        return key in self.mu

    def keys(self):
        return sorted(self.mu)

    def set(self, key: Key, mu: torch.Tensor, sigma: torch.Tensor):
        l, c = key
        if l < self.l_st or l >= self.num_layers or not 0 <= c < self.num_classes:
            raise KeyError(f"bank entry {key} outside layers [{self.l_st}, {self.num_layers}) x classes")
        self.mu[key] = mu.detach().clone()
        self.sigma[key] = sigma.detach().clone()


def ema_update(bank: CentroidBank, stats: ClassBatchStats) -> CentroidBank:
    """EMA-move each centroid present in ``stats`` toward its batch value; first touch initializes."""
    b = bank.beta_fd
    for key in sorted(stats.keys()):
        s = stats[key]
        if not bank.initialized(key):
            bank.set(key, s.mean, s.std)
            continue
        bank.mu[key] = (1 - b) * bank.mu[key] + b * s.mean.detach()
        bank.sigma[key] = (1 - b) * bank.sigma[key] + b * s.std.detach()
    return bank


def average_into_bank(bank: CentroidBank, batches: Iterable[ClassBatchStats]) -> CentroidBank:
    sums: dict[Key, list] = {}
    for stats in batches:
        for key, s in stats.entries.items():
            acc = sums.setdefault(key, [0, 0, 0])
            acc[0] = acc[0] + s.mean.detach()
            acc[1] = acc[1] + s.std.detach()
            acc[2] += 1
    for key in sorted(sums):
        m, sd, n = sums[key]
        bank.set(key, m / n, sd / n)
    return bank


def init_centroids(generator, teacher, num_batches: int, batch_size: int, l_st: int | None = None,
                   beta_fd: float = 0.2, noise_seed: int = 0,
                   on_batch: Callable | None = None) -> CentroidBank:
    """Average the per-class statistics of ``num_batches`` synthetic batches into a new bank.

    ``on_batch(batch)`` is called with each sampled batch (teacher logits
    filled in), e.g. to let range trackers observe the same data.
    """
    from .modelkit.classifier import forward_with_taps
    from .modelkit.generator import balanced_labels, sample_synthetic

    if num_batches < 1:
        raise ValueError("need at least one batch to initialize centroids")
    if generator.num_classes != teacher.num_classes:
        raise ValueError("generator and teacher disagree on the number of classes")
    num_layers = teacher.num_bn_layers
    l_st = default_start_layer(num_layers) if l_st is None else l_st
    bank = CentroidBank(num_layers, teacher.num_classes, l_st, beta_fd)
    collected = []
    with torch.no_grad():
        for k in range(num_batches):
            labels = balanced_labels(generator.num_classes, batch_size)
            batch = sample_synthetic(generator, labels, noise_seed + k)
            out = forward_with_taps(teacher, batch.images)
            batch.teacher_logits = out.logits
            collected.append(class_batch_stats(out.taps, labels, out.logits, l_st))
            if on_batch is not None:
                on_batch(batch)
    return average_into_bank(bank, collected)


@dataclass
class SeparabilityReport:
    fisher_ratio: float
    per_class_variance: list[float]
    layer: int | None = None


def _grouped(features, labels):
    x = torch.as_tensor(features).detach().to(torch.float64).flatten(1)
    y = torch.as_tensor(labels)
    groups = []
    for c in torch.unique(y).tolist():
        g = x[y == c]
        if len(g) >= 2:
            groups.append((c, g))
    if len(groups) < 2:
        raise ValueError("need at least two classes with two or more samples each")
    return x, groups


def fisher_separability(features, labels, layer: int | None = None) -> SeparabilityReport:
    """trace(between-class scatter) / trace(within-class scatter)."""
    _, groups = _grouped(features, labels)
    allx = torch.cat([g for _, g in groups])
    grand = allx.mean(0)
    between = sum(len(g) * ((g.mean(0) - grand) ** 2).sum() for _, g in groups)
    within = sum(((g - g.mean(0)) ** 2).sum() for _, g in groups)
    per_class = [float(g.var(0, unbiased=True).sum()) for _, g in groups]
    return SeparabilityReport(float(between / max(float(within), 1e-12)), per_class, layer)


def class_diversity(features, labels) -> float:
    """Mean over classes of the trace of the unbiased within-class covariance."""
    _, groups = _grouped(features, labels)
    return float(sum(g.var(0, unbiased=True).sum() for _, g in groups) / len(groups))
