"""Desk-scale classifiers with batch-norm feature taps."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from functools import cached_property

import torch
from torch import nn

from .bn import channel_stats

ARCHITECTURES = ("tiny-cnn-6", "tiny-resnet-8")


class UnknownArchitectureError(ValueError):
    pass


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(conv3x3(cin, cout, stride), nn.BatchNorm2d(cout), nn.ReLU())


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.relu1 = nn.ReLU()
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        self.relu_out = nn.ReLU()

    def forward(self, x):
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu_out(out + self.shortcut(x))


class Classifier(nn.Module):
    """Conv trunk, global average pool and a linear head.

    ``bn_layers`` lists the batch-norm modules in declaration order; tap ``l``
    of :func:`forward_with_taps` belongs to ``bn_layers[l]``.
    """

    def __init__(self, arch: str, trunk: nn.Module, feature_dim: int, num_classes: int,
                 in_channels: int = 3, width: int = 8):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.width = width
        self.trunk = trunk
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(feature_dim, num_classes)

    @property
    def bn_layers(self) -> list[nn.BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    @property
    def num_bn_layers(self) -> int:
        return len(self.bn_layers)

    @property
    def descriptor(self) -> str:
        return f"{self.arch}:classes={self.num_classes}:in={self.in_channels}:width={self.width}"

    def features(self, x):
        return self.pool(self.trunk(x)).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


def _tiny_cnn_6(num_classes, in_channels, width):
    w = width
    trunk = nn.Sequential(
        ConvBNReLU(in_channels, w),
        ConvBNReLU(w, w),
        ConvBNReLU(w, 2 * w, stride=2),
        ConvBNReLU(2 * w, 2 * w),
        ConvBNReLU(2 * w, 4 * w, stride=2),
        ConvBNReLU(4 * w, 4 * w),
    )
    return trunk, 4 * w


def _tiny_resnet_8(num_classes, in_channels, width):
    w = width
    trunk = nn.Sequential(
        ConvBNReLU(in_channels, w),
        BasicBlock(w, w),
        BasicBlock(w, 2 * w, stride=2),
        BasicBlock(2 * w, 2 * w),
    )
    return trunk, 2 * w


_BUILDERS = {"tiny-cnn-6": _tiny_cnn_6, "tiny-resnet-8": _tiny_resnet_8}


def parse_descriptor(descriptor: str) -> dict:
    arch, *fields = descriptor.split(":")
    out = {"arch": arch}
    for f in fields:
        k, v = f.split("=")
        out[{"classes": "num_classes", "in": "in_channels"}.get(k, k)] = int(v)
    return out


def build_classifier(arch: str, num_classes: int = 10, seed: int = 0, in_channels: int = 3,
                     width: int = 8) -> Classifier:
    """Build a registered architecture with deterministic initialization."""
    if arch not in _BUILDERS:
        raise UnknownArchitectureError(f"unknown architecture {arch!r}; known: {', '.join(ARCHITECTURES)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        trunk, dim = _BUILDERS[arch](num_classes, in_channels, width)
        model = Classifier(arch, trunk, dim, num_classes, in_channels, width)
    return model


@dataclass
class Tap:
    features: torch.Tensor

    @cached_property
    def stats(self) -> tuple[torch.Tensor, torch.Tensor]:
        return channel_stats(self.features)

    @property
    def mean(self):
        return self.stats[0]

    @property
    def std(self):
        return self.stats[1]


@dataclass
class TapOutput:
    logits: torch.Tensor
    taps: list[Tap]
    penultimate: torch.Tensor


@contextlib.contextmanager
def _capture(model):
    net = getattr(model, "net", model)
    bns = net.bn_layers
    captured: list = [None] * len(bns)
    pen: list = [None]
    handles = []
    for i, bn in enumerate(bns):
        def hook(_m, inputs, i=i):
            captured[i] = inputs[0]
        handles.append(bn.register_forward_pre_hook(hook))
    handles.append(net.head.register_forward_pre_hook(lambda _m, inputs: pen.__setitem__(0, inputs[0])))
    try:
        yield captured, pen
    finally:
        for h in handles:
            h.remove()


def forward_with_taps(model: nn.Module, x: torch.Tensor) -> TapOutput:
    """Forward ``x`` and capture the input of every batch-norm layer and the head."""
    net = getattr(model, "net", model)
    expected = net.in_channels
    if x.dim() != 4 or x.shape[1] != expected:
        raise ValueError(f"expected input of shape (N, {expected}, H, W), got {tuple(x.shape)}")
    with _capture(model) as (captured, pen):
        logits = model(x)
    return TapOutput(logits=logits, taps=[Tap(f) for f in captured], penultimate=pen[0])
