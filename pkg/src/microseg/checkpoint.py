"""Portable parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"MSEGCKPT"
    version    u32      1
    count      u32      number of tensors
    meta_len   u32      length of the UTF-8 JSON metadata block
    meta       bytes    JSON object (variant, scale, num_classes, in_chans, ...)
    then ``count`` entries:
        name_len  u16
        name      UTF-8, dot-separated module path (e.g. ``encoder.stages.0.blocks.1.attn.qkv.weight``)
        ndim      u8
        dims      u32 * ndim
        data      float32 * prod(dims), C order

Integer buffers such as BatchNorm ``num_batches_tracked`` are stored as float32
and cast back to the model's dtype on load.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch
from torch import nn

MAGIC = b"MSEGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: nn.Module, path, meta: dict = None) -> Path:
    """Write atomically: a temp file in the same directory is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", VERSION, len(state), len(meta_bytes)))
            fh.write(meta_bytes)
            for name, t in state.items():
                arr = t.detach().cpu().numpy().astype("<f4", copy=False)
                raw = name.encode()
                fh.write(struct.pack("<HB", len(raw), arr.ndim))
                fh.write(raw)
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr).tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count, meta_len = struct.unpack_from("<III", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 20
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", buf, off)
        off += 3
        name = buf[off:off + name_len].decode()
        off += name_len
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        if off + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
    return meta, tensors


def load_into(model: nn.Module, tensors: Dict[str, np.ndarray]) -> None:
    """Copy tensors into ``model``; the first missing, extra or mis-shaped layer raises."""
    state = model.state_dict()
    for name, ref in state.items():
        if name not in tensors:
            raise CheckpointError(f"incompatible checkpoint: layer {name} missing")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"incompatible checkpoint: layer {name} has shape {tuple(tensors[name].shape)}, "
                f"model expects {tuple(ref.shape)}"
            )
    extra = [k for k in tensors if k not in state]
    if extra:
        raise CheckpointError(f"incompatible checkpoint: unexpected layer {extra[0]}")
    model.load_state_dict({k: torch.from_numpy(tensors[k]).to(state[k].dtype) for k in state})


def load_checkpoint(model: nn.Module, path) -> dict:
    meta, tensors = read_checkpoint(path)
    load_into(model, tensors)
    return meta
