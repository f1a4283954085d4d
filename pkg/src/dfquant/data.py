"""Procedural toy image classification data and a small binary dataset format.

Each class is a geometric primitive family drawn with random position, scale
and color jitter on a noisy background. Generation is a pure function of the
seed, so nothing is ever downloaded.

Dataset file layout (little endian)::

    magic     4s   b"DFQD"
    version   u16
    split     u8   0 = train, 1 = test
    reserved  u8
    n_classes u16
    count     u32
    height    u16
    width     u16
    channels  u16
    mean      channels x f64
    std       channels x f64
    pixels    count*height*width*channels x u8   (row-major N, H, W, C)
    labels    count x u16
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DFQD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBHIHHH")
SPLITS = ("train", "test")

SHAPES = (
    "disk", "square", "triangle", "cross", "ring",
    "hbars", "vbars", "diagonal", "checker", "diamond",
)
# Base RGB colors, one per class; a class is (shape, color) with jitter.
PALETTE = np.array([
    [230, 60, 60], [60, 200, 80], [70, 90, 230], [235, 200, 50], [200, 70, 210],
    [60, 210, 210], [240, 140, 40], [150, 150, 150], [120, 60, 30], [250, 250, 250],
], dtype=np.float64)


class DatasetError(ValueError):
    pass


class MalformedFileError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: tuple[int, int, int] = (32, 32, 3)
    position_jitter: float = 0.2
    scale_jitter: float = 0.25
    color_jitter: float = 60.0
    noise_level: float = 30.0
    seed: int = 0

    def validate(self):
        problems = []
        if not 2 <= self.num_classes <= len(SHAPES):
            problems.append(f"num_classes must be in [2, {len(SHAPES)}]")
        if self.samples_per_class < 50:
            problems.append("samples_per_class must be >= 50")
        h, w, c = self.image_size
        if h < 8 or w < 8 or c not in (1, 3):
            problems.append("image_size must be at least 8x8 with 1 or 3 channels")
        if min(self.position_jitter, self.scale_jitter, self.color_jitter, self.noise_level) < 0:
            problems.append("jitter and noise levels must be non-negative")
        if problems:
            raise DatasetError("; ".join(problems))


@dataclass
class LabeledDataset:
    """Normalized images in NCHW float32 plus the raw uint8 pixels they came from."""

    images: torch.Tensor
    labels: torch.Tensor
    split: str
    mean: np.ndarray
    std: np.ndarray
    num_classes: int
    pixels: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.labels)


def _mask(shape: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return inside
    if shape == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        t = max(r / 3, 1.0)
        return inside & ((np.abs(dy) <= t) | (np.abs(dx) <= t))
    if shape == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= 0.55 * r)
    if shape == "hbars":
        return inside & (np.floor((dy + r) / max(r / 2.5, 1.0)) % 2 == 0)
    if shape == "vbars":
        return inside & (np.floor((dx + r) / max(r / 2.5, 1.0)) % 2 == 0)
    if shape == "diagonal":
        return inside & (np.abs(dy - dx) <= max(r / 3, 1.0))
    if shape == "checker":
        cell = max(r / 2, 1.0)
        return inside & ((np.floor((dy + r) / cell) + np.floor((dx + r) / cell)) % 2 == 0)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise DatasetError(f"unknown shape {shape!r}")


def _render(rng: np.random.Generator, label: int, spec: DatasetSpec) -> np.ndarray:
    h, w, c = spec.image_size
    base_r = 0.28 * min(h, w)
    r = base_r * (1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter))
    cy = h / 2 + rng.uniform(-1, 1) * spec.position_jitter * h
    cx = w / 2 + rng.uniform(-1, 1) * spec.position_jitter * w
    background = rng.uniform(20, 90, size=3)
    color = PALETTE[label] + rng.normal(0, spec.color_jitter, size=3)
    img = np.empty((h, w, 3))
    img[:] = background
    img[_mask(SHAPES[label], h, w, cy, cx, r)] = color
    img += rng.normal(0, spec.noise_level, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if c == 1:
        img = img.mean(axis=2, keepdims=True).round().astype(np.uint8)
    return img


def normalize(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> torch.Tensor:
    x = (pixels.astype(np.float64) / 255.0 - mean) / std
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(np.float32))


def _channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = pixels.astype(np.float64) / 255.0
    return x.mean(axis=(0, 1, 2)), x.std(axis=(0, 1, 2))


def _build(pixels, labels, split, mean, std, num_classes) -> LabeledDataset:
    return LabeledDataset(
        images=normalize(pixels, mean, std),
        labels=torch.from_numpy(labels.astype(np.int64)),
        split=split,
        mean=np.asarray(mean, dtype=np.float64),
        std=np.asarray(std, dtype=np.float64),
        num_classes=num_classes,
        pixels=pixels,
    )


def make_toy_dataset(spec: DatasetSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate a class-balanced 80/20 train/test split; byte-identical for a given seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_test = spec.samples_per_class // 5
    n_train = spec.samples_per_class - n_test
    seen: set[bytes] = set()
    splits = {"train": ([], []), "test": ([], [])}
    for label in range(spec.num_classes):
        for split, count in (("train", n_train), ("test", n_test)):
            made = 0
            while made < count:
                img = _render(rng, label, spec)
                key = img.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                splits[split][0].append(img)
                splits[split][1].append(label)
                made += 1

    def stack(split):
        imgs, labels = splits[split]
        return np.stack(imgs), np.asarray(labels, dtype=np.int64)

    train_px, train_y = stack("train")
    test_px, test_y = stack("test")
    mean, std = _channel_stats(train_px)
    return (
        _build(train_px, train_y, "train", mean, std, spec.num_classes),
        _build(test_px, test_y, "test", mean, std, spec.num_classes),
    )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def export_dataset(ds: LabeledDataset, path) -> str:
    """Write ``ds`` in the binary layout and a ``.json`` sidecar; returns the file sha256."""
    path = Path(path)
    n, h, w, c = ds.pixels.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, SPLITS.index(ds.split), 0, ds.num_classes, n, h, w, c)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(ds.mean, dtype="<f8").tobytes())
        f.write(np.asarray(ds.std, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.pixels, dtype=np.uint8).tobytes())
        f.write(ds.labels.numpy().astype("<u2").tobytes())
    digest = sha256_file(path)
    sidecar = {"file": path.name, "sha256": digest, "count": n, "num_classes": ds.num_classes,
               "split": ds.split, "image_size": [h, w, c]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return digest


def load_external(path, normalization: tuple[np.ndarray, np.ndarray] | None = None) -> LabeledDataset:
    """Load a dataset file; ``normalization`` overrides the (mean, std) stored in the header."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MalformedFileError(f"{path}: file shorter than header")
    magic, version, split, _, n_classes, n, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    if split >= len(SPLITS) or n_classes < 2 or c not in (1, 3):
        raise MalformedFileError(f"{path}: invalid header fields")
    off = _HEADER.size
    expected = off + 16 * c + n * h * w * c + 2 * n
    if len(raw) != expected:
        raise MalformedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    mean = np.frombuffer(raw, "<f8", c, off)
    std = np.frombuffer(raw, "<f8", c, off + 8 * c)
    off += 16 * c
    pixels = np.frombuffer(raw, np.uint8, n * h * w * c, off).reshape(n, h, w, c).copy()
    labels = np.frombuffer(raw, "<u2", n, off + n * h * w * c).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise DatasetError(f"{path}: label {labels.max()} out of range for {n_classes} classes")
    if normalization is not None:
        mean, std = (np.asarray(v, dtype=np.float64) for v in normalization)
    if np.any(np.asarray(std) <= 0):
        raise DatasetError("normalization std must be positive")
    return _build(pixels, labels, SPLITS[split], mean, std, n_classes)


def verify_checksum(path) -> bool:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return sidecar["sha256"] == sha256_file(path)


def iterate_batches(ds: LabeledDataset, batch_size: int, shuffle_seed: int | None = None):
    n = len(ds)
    if shuffle_seed is None:
        order = torch.arange(n)
    else:
        order = torch.randperm(n, generator=torch.Generator().manual_seed(shuffle_seed))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
