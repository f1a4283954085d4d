"""Training objectives for the generator and the quantized student."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .modelkit.bn import BNLayerParams
from .stats import CentroidBank, ClassBatchStats


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.1
    alpha2: float = 0.9
    alpha3: float = 0.6
    gamma: float = 1.0

    def __post_init__(self):
        bad = [k for k, v in vars(self).items() if not v >= 0]
        if bad:
            raise ValueError(f"loss weights must be non-negative: {', '.join(bad)}")


@dataclass(frozen=True)
class DEConfig:
    lambda_mu: float = 0.3
    lambda_sigma: float = 0.15
    noise_seed: int = 0

    def __post_init__(self):
        if not (self.lambda_mu >= 0 and self.lambda_sigma >= 0):
            raise ValueError("diversity perturbation scales must be non-negative")


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return F.cross_entropy(logits, labels)


def _mean_std(tap):
    if isinstance(tap, tuple):
        return tap
    return tap.mean, tap.std


def bns_loss(taps: Sequence, bn_params: Sequence[BNLayerParams]) -> torch.Tensor:
    """Squared distance of each layer's batch (mean, std) to the stored running (mean, std), summed."""
    if len(taps) != len(bn_params):
        raise ValueError(f"{len(taps)} taps for {len(bn_params)} BN layers")
    total = 0.0
    for tap, p in zip(taps, bn_params):
        mean, std = _mean_std(tap)
        if mean.shape != p.running_mu.shape:
            raise ValueError("tap channel count does not match BN layer")
        total = total + ((mean - p.running_mu.to(mean)) ** 2).sum() + ((std - p.running_sigma.to(std)) ** 2).sum()
    return torch.as_tensor(total)


def _active_keys(stats: ClassBatchStats, bank: CentroidBank):
    return [k for k in sorted(stats.keys()) if bank.initialized(k)]


def fda_loss(stats: ClassBatchStats, bank: CentroidBank) -> torch.Tensor:
    """Sum over (layer, class) of squared distances between batch statistics and their centroids.

    Pairs absent from ``stats`` or not yet initialized in ``bank`` contribute nothing.
    """
    total = torch.zeros(())
    for key in _active_keys(stats, bank):
        s = stats[key]
        total = total + ((s.mean - bank.mu[key].to(s.mean)) ** 2).sum() + ((s.std - bank.sigma[key].to(s.std)) ** 2).sum()
    return total


def _entry_generator(seed: int, step: int, key) -> torch.Generator:
    digest = hashlib.blake2b(f"{seed}:{step}:{key[0]}:{key[1]}".encode(), digest_size=8).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest, "little") & (2**63 - 1))


def perturbed_centroid(bank: CentroidBank, key, cfg: DEConfig, step: int):
    """Centroid of ``key`` with Gaussian noise (std lambda_mu, lambda_sigma) added elementwise."""
    gen = _entry_generator(cfg.noise_seed, step, key)
    mu, sigma = bank.mu[key], bank.sigma[key]
    n_mu = torch.randn(mu.shape, generator=gen, dtype=torch.float64)
    n_sigma = torch.randn(sigma.shape, generator=gen, dtype=torch.float64)
    return (mu + (cfg.lambda_mu * n_mu).to(mu.dtype),
            sigma + (cfg.lambda_sigma * n_sigma).to(sigma.dtype))


def de_loss(stats: ClassBatchStats, bank: CentroidBank, cfg: DEConfig, step: int = 0) -> torch.Tensor:
    """FDA distance against noise-perturbed centroids; the noise is a pure function of (seed, step, key)."""
    total = torch.zeros(())
    for key in _active_keys(stats, bank):
        s = stats[key]
        mu, sigma = perturbed_centroid(bank, key, cfg, step)
        total = total + ((s.mean - mu.to(s.mean)) ** 2).sum() + ((s.std - sigma.to(s.std)) ** 2).sum()
    return total


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL(teacher || student) at temperature 1."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    return F.kl_div(F.log_softmax(student_logits, 1), F.log_softmax(teacher_logits, 1),
                    reduction="batchmean", log_target=True)


@dataclass
class GeneratorBatch:
    """What one generator step sees: teacher outputs on synthetic data and its taps."""

    teacher_logits: torch.Tensor
    pseudo_labels: torch.Tensor
    taps: Sequence
    class_stats: ClassBatchStats | None = None


def generator_objective_warmup(ctx: GeneratorBatch, bn_params: Sequence[BNLayerParams],
                               weights: LossWeights, terms: dict | None = None) -> torch.Tensor:
    """CE on pseudo-labels plus alpha1 times global BN-statistic matching."""
    ce = ce_loss(ctx.teacher_logits, ctx.pseudo_labels)
    bns = bns_loss(ctx.taps, bn_params)
    if terms is not None:
        terms.update(ce=ce.detach(), bns=bns.detach())
    return ce + weights.alpha1 * bns


def generator_objective_full(ctx: GeneratorBatch, bn_params: Sequence[BNLayerParams], bank: CentroidBank,
                             weights: LossWeights, de_cfg: DEConfig, step: int = 0,
                             terms: dict | None = None) -> torch.Tensor:
    """Warm-up objective plus alpha2 * FDA and alpha3 * DE terms."""
    if ctx.class_stats is None:
        raise ValueError("class statistics are required for the alignment terms")
    base = generator_objective_warmup(ctx, bn_params, weights, terms)
    fda = fda_loss(ctx.class_stats, bank)
    de = de_loss(ctx.class_stats, bank, de_cfg, step)
    if terms is not None:
        terms.update(fda=fda.detach(), de=de.detach())
    return base + weights.alpha2 * fda + weights.alpha3 * de


def finetune_objective(student_logits, teacher_logits, pseudo_labels, gamma: float,
                       terms: dict | None = None) -> torch.Tensor:
    ce = ce_loss(student_logits, pseudo_labels)
    kd = kd_loss(student_logits, teacher_logits)
    if terms is not None:
        terms.update(ce=ce.detach(), kd=kd.detach())
    return ce + gamma * kd
