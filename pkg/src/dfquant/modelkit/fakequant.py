"""Fake-quantized copies of a trained classifier."""
from __future__ import annotations

import contextlib
import copy

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..quantizer import QuantConfig, RangeTracker, fake_quantize
from .classifier import Classifier


class QuantConv2d(nn.Conv2d):
    def forward(self, x):
        w = fake_quantize(self.weight, self.weight_alpha, self.weight_bits)
        return self._conv_forward(x, w, self.bias)


class QuantLinear(nn.Linear):
    def forward(self, x):
        w = fake_quantize(self.weight, self.weight_alpha, self.weight_bits)
        return F.linear(x, w, self.bias)


def _as_quant(module: nn.Module, bits: int) -> nn.Module:
    q = copy.deepcopy(module)
    q.__class__ = QuantConv2d if isinstance(module, nn.Conv2d) else QuantLinear
    q.weight_bits = bits
    q.weight_alpha = float(module.weight.detach().abs().max())
    if q.weight_alpha <= 0:
        raise ValueError("cannot quantize an all-zero weight tensor")
    return q


class QuantAct(nn.Module):
    """ReLU followed by activation fake-quantization with a tracked clip range."""

    def __init__(self, bits: int, momentum: float):
        super().__init__()
        self.bits = bits
        self.tracker = RangeTracker(momentum=momentum)
        self.observing = False

    def forward(self, x):
        x = F.relu(x)
        t = self.tracker
        if self.observing and not t.frozen:
            t.observe(x)
        if not t.initialized or t.running_max <= 0:
            # uncalibrated: pass through until a range has been observed
            return x
        return fake_quantize(x, t.running_max, self.bits)


class FakeQuantModel(nn.Module):
    """A classifier whose weights and post-ReLU activations are fake-quantized.

    Batch-norm layers always run in eval mode on the statistics copied from the
    full-precision model; their affine parameters stay trainable.
    """

    def __init__(self, net: Classifier, cfg: QuantConfig):
        super().__init__()
        self.net = net
        self.quant_cfg = cfg

    @property
    def bn_layers(self):
        return self.net.bn_layers

    @property
    def num_classes(self):
        return self.net.num_classes

    def act_quantizers(self) -> list[QuantAct]:
        return [m for m in self.net.modules() if isinstance(m, QuantAct)]

    def trackers(self) -> list[RangeTracker]:
        return [q.tracker for q in self.act_quantizers()]

    def weight_alphas(self) -> list[float]:
        return [m.weight_alpha for m in self.net.modules() if isinstance(m, (QuantConv2d, QuantLinear))]

    def train(self, mode: bool = True):
        super().train(mode)
        for bn in self.bn_layers:
            bn.eval()
        return self

    @contextlib.contextmanager
    def observing(self):
        """Let unfrozen activation range trackers observe forwards run inside the block."""
        qs = self.act_quantizers()
        for q in qs:
            q.observing = True
        try:
            yield self
        finally:
            for q in qs:
                q.observing = False

    def freeze_ranges(self):
        for t in self.trackers():
            if not t.frozen:
                t.freeze()
        return self

    @property
    def ranges_frozen(self) -> bool:
        return all(t.frozen for t in self.trackers())

    def forward(self, x):
        return self.net(x)


def _swap(module: nn.Module, cfg: QuantConfig):
    for name, child in module.named_children():
        if isinstance(child, (nn.Conv2d, nn.Linear)):
            setattr(module, name, _as_quant(child, cfg.weight_bits))
        elif isinstance(child, nn.ReLU):
            setattr(module, name, QuantAct(cfg.act_bits, cfg.range_momentum))
        else:
            _swap(child, cfg)


def quantize_model(m: Classifier, cfg: QuantConfig) -> FakeQuantModel:
    """Wrap a copy of ``m`` with per-tensor weight (alpha = max|w|) and activation fake-quant."""
    for name, p in m.state_dict().items():
        if p.is_floating_point() and not torch.isfinite(p).all():
            raise ValueError(f"model has non-finite values in {name}")
    net = copy.deepcopy(m)
    _swap(net, cfg)
    for p in net.parameters():
        p.requires_grad_(True)
    return FakeQuantModel(net, cfg).train(False)


def save_quantized(path, student: FakeQuantModel, manifest: dict | None = None) -> None:
    """Student weights, weight clip ranges and activation tracker states in one container."""
    from .checkpoint import Container, module_arrays, save_container

    q = student.quant_cfg
    arrays = module_arrays(student.net)
    for i, t in enumerate(student.trackers()):
        arrays[f"tracker/{i}"] = np.array([t.running_max, t.initialized, t.frozen, t.momentum], dtype=np.float64)
    meta = {"weight_bits": q.weight_bits, "act_bits": q.act_bits, "range_momentum": q.range_momentum,
            "weight_alphas": student.weight_alphas()}
    save_container(path, Container("fq:" + student.net.descriptor, arrays, manifest or {}, meta))


def load_quantized(path) -> FakeQuantModel:
    from .checkpoint import CheckpointError, load_container, load_module_arrays
    from .classifier import build_classifier, parse_descriptor

    c = load_container(path)
    if not c.descriptor.startswith("fq:"):
        raise CheckpointError(f"{path} does not hold a quantized model")
    spec = parse_descriptor(c.descriptor[3:])
    net = build_classifier(spec.pop("arch"), **spec)
    m = c.meta
    student = quantize_model(net, QuantConfig(m["weight_bits"], m["act_bits"], range_momentum=m["range_momentum"]))
    load_module_arrays(student.net, {k: v for k, v in c.arrays.items() if not k.startswith("tracker/")})
    qmods = [x for x in student.net.modules() if isinstance(x, (QuantConv2d, QuantLinear))]
    for mod, alpha in zip(qmods, m["weight_alphas"]):
        mod.weight_alpha = alpha
    for i, t in enumerate(student.trackers()):
        running_max, initialized, frozen, momentum = c.arrays[f"tracker/{i}"].tolist()
        t.running_max, t.initialized, t.frozen, t.momentum = running_max, bool(initialized), bool(frozen), momentum
    return student.eval()
