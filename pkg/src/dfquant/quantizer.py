"""Symmetric uniform per-tensor quantization.

Values are mapped to signed N-bit integers with ``S = 2*alpha / (2**N - 1)``,
rounded half away from zero and clamped to ``[-2**(N-1), 2**(N-1) - 1]``.
``fake_quantize`` is the quantize/dequantize round trip with a
straight-through gradient, for use inside training graphs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

MIN_BITS = 2
MAX_BITS = 16
ROUNDING_RULES = ("half_away_from_zero",)


class QuantizationError(ValueError):
    pass


class InvalidRangeError(QuantizationError):
    pass


class InvalidInputError(QuantizationError):
    pass


class FrozenTrackerError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int = 4
    act_bits: int = 4
    rounding: str = "half_away_from_zero"
    range_momentum: float = 0.1

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            _check_bits(getattr(self, name), name)
        if self.rounding not in ROUNDING_RULES:
            raise QuantizationError(f"unknown rounding rule {self.rounding!r}")
        if not 0.0 <= self.range_momentum <= 1.0:
            raise QuantizationError(f"range_momentum must lie in [0, 1], got {self.range_momentum}")


@dataclass(frozen=True)
class QuantizedTensor:
    ints: torch.Tensor
    scale: float
    clip: float
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (self.clip > 0 and self.scale > 0):
            raise InvalidRangeError("scale and clip must be positive")
        lo, hi = int_range(self.bits)
        if self.ints.numel() and (int(self.ints.min()) < lo or int(self.ints.max()) > hi):
            raise QuantizationError(f"integer payload outside [{lo}, {hi}]")


def _check_bits(bits, name="bits"):
    if isinstance(bits, bool) or not isinstance(bits, int) or not MIN_BITS <= bits <= MAX_BITS:
        raise QuantizationError(f"{name} must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


def int_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def scale_for(alpha: float, bits: int) -> float:
    return 2.0 * alpha / (2**bits - 1)


def _check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha <= 0:
        raise InvalidRangeError(f"clip range alpha must be a positive finite number, got {alpha}")
    return alpha


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def _grid_indices(x: torch.Tensor, scale: float, bits: int) -> torch.Tensor:
    lo, hi = int_range(bits)
    return round_half_away(x / scale).clamp(lo, hi)


def quantize(x, alpha: float, bits: int) -> QuantizedTensor:
    """Quantize ``x`` to signed ``bits``-bit integers over ``[-alpha, alpha]``."""
    _check_bits(bits)
    alpha = _check_alpha(alpha)
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    if not torch.isfinite(x).all():
        raise InvalidInputError("cannot quantize non-finite values")
    scale = scale_for(alpha, bits)
    ints = _grid_indices(x.detach(), scale, bits).to(torch.int32)
    return QuantizedTensor(ints=ints, scale=scale, clip=alpha, bits=bits)


def dequantize(q: QuantizedTensor, dtype=torch.float64) -> torch.Tensor:
    return q.ints.to(dtype) * q.scale


class _FakeQuantSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha, bits):
        scale = scale_for(alpha, bits)
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        return _grid_indices(x, scale, bits) * scale

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        inside = (x.abs() <= ctx.alpha).to(grad_out.dtype)
        return grad_out * inside, None, None


def fake_quantize(x: torch.Tensor, alpha: float, bits: int) -> torch.Tensor:
    """Quantize-then-dequantize, keeping dtype; gradient is straight-through inside the clip range."""
    _check_bits(bits)
    alpha = _check_alpha(alpha)
    x = torch.as_tensor(x)
    if not torch.isfinite(x).all():
        raise InvalidInputError("cannot quantize non-finite values")
    return _FakeQuantSTE.apply(x, alpha, bits)


@dataclass
class RangeTracker:
    """Momentum-smoothed max(|x|) used as the activation clip range."""

    momentum: float = 0.1
    running_max: float = 0.0
    initialized: bool = False
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise QuantizationError(f"momentum must lie in [0, 1], got {self.momentum}")

    @property
    def alpha(self) -> float:
        return self.running_max

    def observe(self, x) -> "RangeTracker":
        if self.frozen:
            raise FrozenTrackerError("range tracker is frozen")
        x = torch.as_tensor(x)
        if not torch.isfinite(x).all():
            raise InvalidInputError("cannot observe non-finite values")
        batch_max = float(x.detach().abs().max()) if x.numel() else 0.0
        if self.initialized:
            self.running_max = (1.0 - self.momentum) * self.running_max + self.momentum * batch_max
        else:
            self.running_max = batch_max
            self.initialized = True
        return self

    def freeze(self) -> "RangeTracker":
        if not self.initialized or self.running_max <= 0:
            raise QuantizationError("cannot freeze a tracker that has not observed a non-zero range")
        self.frozen = True
        return self


def observe_range(t: RangeTracker, x) -> RangeTracker:
    return t.observe(x)


def freeze_range(t: RangeTracker) -> RangeTracker:
    return t.freeze()
