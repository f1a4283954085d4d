"""Class-conditional image generator and synthetic batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

GENERATOR_ARCHITECTURES = ("cgan-upsample",)


class Generator(nn.Module):
    """Noise plus a learned class embedding, upsampled to a tanh-bounded image.

    ``forward`` returns images in ``[-1, 1]``; :meth:`synthesize` rescales them
    into the classifier's normalized input space using the stored per-channel
    mean/std (the teacher's preprocessing constants).
    """

    def __init__(self, num_classes: int, noise_dim: int = 64, image_size=(32, 32, 3), width: int = 32,
                 mean=None, std=None):
        super().__init__()
        h, w, c = image_size
        if h % 4 or w % 4:
            raise ValueError("image height and width must be multiples of 4")
        self.num_classes = num_classes
        self.noise_dim = noise_dim
        self.image_size = (h, w, c)
        self.width = width
        self.init_hw = (h // 4, w // 4)
        self.label_embedding = nn.Embedding(num_classes, noise_dim)
        self.project = nn.Linear(noise_dim, 2 * width * self.init_hw[0] * self.init_hw[1])
        self.trunk = nn.Sequential(
            nn.BatchNorm2d(2 * width, track_running_stats=False),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.BatchNorm2d(2 * width, track_running_stats=False),
            nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(2 * width, width, 3, padding=1),
            nn.BatchNorm2d(width, track_running_stats=False),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, c, 3, padding=1),
            nn.Tanh(),
        )
        mean = torch.full((c,), 0.5) if mean is None else torch.tensor(np.array(mean), dtype=torch.float32)
        std = torch.full((c,), 0.5) if std is None else torch.tensor(np.array(std), dtype=torch.float32)
        self.register_buffer("out_mean", mean.clone())
        self.register_buffer("out_std", std.clone())

    @property
    def descriptor(self) -> str:
        h, w, c = self.image_size
        return (f"cgan-upsample:classes={self.num_classes}:noise={self.noise_dim}:"
                f"h={h}:w={w}:c={c}:width={self.width}")

    def forward(self, noise: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        z = noise + self.label_embedding(labels)
        out = self.project(z).view(z.shape[0], 2 * self.width, *self.init_hw)
        return self.trunk(out)

    def to_model_space(self, img: torch.Tensor) -> torch.Tensor:
        return ((img + 1) / 2 - self.out_mean.view(1, -1, 1, 1)) / self.out_std.view(1, -1, 1, 1)

    def synthesize(self, noise, labels):
        return self.to_model_space(self(noise, labels))


def build_generator(num_classes: int, seed: int = 0, noise_dim: int = 64, image_size=(32, 32, 3),
                    width: int = 32, mean=None, std=None, arch: str = "cgan-upsample") -> Generator:
    if arch not in GENERATOR_ARCHITECTURES:
        raise ValueError(f"unknown generator architecture {arch!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(num_classes, noise_dim, image_size, width, mean, std)


@dataclass
class SyntheticBatch:
    images: torch.Tensor
    pseudo_labels: torch.Tensor
    noise: torch.Tensor
    teacher_logits: torch.Tensor | None = None

    def __len__(self):
        return len(self.pseudo_labels)


def balanced_labels(num_classes: int, m: int, seed: int | None = None) -> torch.Tensor:
    """``m`` labels cycling through the classes; shuffled when ``seed`` is given."""
    labels = torch.arange(m) % num_classes
    if seed is not None:
        labels = labels[torch.randperm(m, generator=torch.Generator().manual_seed(seed))]
    return labels


def gaussian_noise(m: int, dim: int, seed: int) -> torch.Tensor:
    return torch.randn(m, dim, generator=torch.Generator().manual_seed(seed))


def sample_synthetic(g: Generator, labels, noise_seed: int, grad: bool = False) -> SyntheticBatch:
    """Draw one batch from ``g``; deterministic in (parameters, labels, noise_seed)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= g.num_classes):
        raise ValueError(f"labels must lie in [0, {g.num_classes})")
    noise = gaussian_noise(len(labels), g.noise_dim, noise_seed)
    with torch.set_grad_enabled(grad):
        images = g.synthesize(noise, labels)
    return SyntheticBatch(images=images, pseudo_labels=labels, noise=noise)


def load_generator(container) -> Generator:
    """Rebuild a generator from a checkpoint container written with its ``descriptor``."""
    from .checkpoint import CheckpointError, load_module_arrays

    arch, *fields = container.descriptor.split(":")
    if arch not in GENERATOR_ARCHITECTURES:
        raise CheckpointError(f"not a generator checkpoint: {container.descriptor!r}")
    f = dict(x.split("=") for x in fields)
    g = Generator(int(f["classes"]), int(f["noise"]), (int(f["h"]), int(f["w"]), int(f["c"])), int(f["width"]))
    load_module_arrays(g, container.arrays)
    return g
