"""Versioned binary checkpoint container.

Layout::

    b"DFQC"  u16 version  u32 header length  header (UTF-8 JSON)  array payload

The JSON header holds the descriptor string, the manifest, free-form metadata
and an index of arrays (name, dtype, shape, offset) in declaration order.
Arrays are stored little endian and contiguous. Serialization is canonical, so
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"DFQC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    descriptor: str
    arrays: dict[str, np.ndarray]
    manifest: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dumps(c: Container) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in c.arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = _canonical({"descriptor": c.descriptor, "manifest": c.manifest, "meta": c.meta, "arrays": index})
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(raw: bytes) -> Container:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as e:
        raise CheckpointError("corrupt checkpoint header") from e
    base = _PREFIX.size + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + count * dtype.itemsize > len(raw):
            raise CheckpointError(f"array {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(raw, dtype, count, start).reshape(entry["shape"]).copy()
    return Container(header["descriptor"], arrays, header["manifest"], header["meta"])


def save_container(path, c: Container) -> None:
    Path(path).write_bytes(dumps(c))


def load_container(path) -> Container:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """State dict (parameters then buffers, declaration order) as numpy arrays."""
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint is missing {sorted(missing)[:5]}")
    module.load_state_dict(state, strict=True)


def save_classifier(path, model, manifest: dict | None = None, meta: dict | None = None) -> None:
    save_container(path, Container(model.descriptor, module_arrays(model), manifest or {}, meta or {}))


def load_classifier(path):
    from .classifier import build_classifier, parse_descriptor

    c = load_container(path)
    spec = parse_descriptor(c.descriptor)
    model = build_classifier(spec.pop("arch"), **spec)
    load_module_arrays(model, c.arrays)
    model.eval()
    return model, c
