"""Versioned binary checkpoints.

Layout (little-endian)::

    b"MTCKPT"  u16 version
    u32 config length, config block (UTF-8 ``key=value`` lines)
    u32 tensor count
    per tensor: u32 name length, name, u32 rank, rank × u64 extents, float32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, MoodTagger, build_model

MAGIC = b"MTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: MoodTagger, path) -> None:
    block = "".join(f"{k}={v}\n" for k, v in model.cfg.to_items().items()).encode("utf-8")
    arrays = model.state_arrays()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(block)), block,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a moodtheme checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    items = {}
    for line in take(clen).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        items[k] = v
    cfg = ModelConfig.from_items(items)
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return cfg, arrays


def load_checkpoint(path) -> MoodTagger:
    cfg, arrays = read_checkpoint(path)
    model = build_model(cfg, seed=0)
    expected = set(model.state_arrays())
    if set(arrays) != expected:
        missing, extra = expected - set(arrays), set(arrays) - expected
        raise CheckpointError(f"{path}: tensor names do not match the config "
                              f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})")
    dtype = model.dtype
    for name, arr in arrays.items():
        if name.startswith("buffer:"):
            key = name[len("buffer:"):]
            if arr.shape != model.buffers[key].shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}")
            model.buffers[key] = arr.astype(dtype)
        else:
            if arr.shape != model.params[name].shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}")
            model.params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return model
