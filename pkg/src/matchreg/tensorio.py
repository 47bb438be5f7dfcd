"""Versioned binary container for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"MRTB"
    version u32
    meta    u32 length + UTF-8 JSON (free-form metadata)
    count   u32
    per tensor:
        name  u16 length + UTF-8
        ndim  u8, then ndim * u32 dims
        data  float32 little-endian, C order

Round trips are bit-exact for float32 tensors.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .validation import CheckpointError

MAGIC = b"MRTB"
VERSION = 1


def write_named_tensors(path, tensors: dict, meta: dict = None):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float32).numpy()
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_named_tensors(path):
    """Returns (tensors, meta). Raises CheckpointError on any malformation."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated file")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        numel = int(np.prod(shape)) if shape else 1
        raw = take(4 * numel)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return tensors, meta
