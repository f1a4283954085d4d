from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class DegenerateBatchError(ValueError):
    pass


@dataclass
class BNLayerParams:
    gamma: torch.Tensor
    beta: torch.Tensor
    running_mu: torch.Tensor
    running_sigma: torch.Tensor
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if any(t.shape != (c,) for t in (self.beta, self.running_mu, self.running_sigma)):
            raise ValueError("BN parameter vectors must share the channel dimension")
        if (self.running_sigma < 0).any():
            raise ValueError("running_sigma must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def from_module(cls, bn: nn.modules.batchnorm._BatchNorm) -> "BNLayerParams":
        return cls(
            gamma=bn.weight.detach().clone(),
            beta=bn.bias.detach().clone(),
            running_mu=bn.running_mean.detach().clone(),
            running_sigma=bn.running_var.detach().clamp_min(0).sqrt(),
            eps=bn.eps,
        )


def _reduce_dims(x: torch.Tensor) -> list[int]:
    return [0] + list(range(2, x.dim()))


def _expand(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return v.view(1, -1, *([1] * (x.dim() - 2)))


def bn_forward(x: torch.Tensor, p: BNLayerParams, mode: str = "eval"):
    """Batch-normalize ``x`` (N, C, ...).

    Returns ``(y, (batch_mean, batch_std))`` in train mode and ``y`` in eval mode.
    The batch std is the biased one used for normalization.
    """
    if x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"expected {p.gamma.shape[0]} channels, got {x.shape[1]}")
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("train-mode batch normalization needs at least 2 samples")
        dims = _reduce_dims(x)
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        y = (x - _expand(mean, x)) / torch.sqrt(_expand(var, x) + p.eps)
        return _expand(p.gamma, x) * y + _expand(p.beta, x), (mean, var.sqrt())
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    var = p.running_sigma**2
    y = (x - _expand(p.running_mu, x)) / torch.sqrt(_expand(var, x) + p.eps)
    return _expand(p.gamma, x) * y + _expand(p.beta, x)


def safe_std(var: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; a tiny floor keeps gradients finite.
    return var.clamp_min(1e-24).sqrt()


def channel_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and unbiased std over every non-channel axis."""
    dims = _reduce_dims(x)
    mean = x.mean(dim=dims)
    var = x.var(dim=dims, unbiased=True)
    return mean, safe_std(var)
