"""Binary checkpoint container for named float32 tensors.

Layout (all integers little-endian):
    magic       8 bytes  b"TSEGCKPT"
    version     u32      currently 1
    count       u64      number of tensors
    per tensor:
        name_len    u32
        name        utf-8 bytes
        rank        u64
        dims        rank * u64
        data        prod(dims) * f32

Tensors are written in sorted-name order so the same state always produces
the same bytes; load(save(x)) round-trips bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"TSEGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors):
    """tensors: dict name -> Tensor or ndarray (float32)."""
    items = sorted(tensors.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(items)))
        for name, t in items:
            # asarray(order="C"), not ascontiguousarray: the latter turns rank-0 into (1,)
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            f.write(arr.tobytes())


def _need(f, n, what, path):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what} at byte {f.tell() - len(buf)}")
    return buf


def load(path):
    """Returns dict name -> float32 ndarray."""
    out = {}
    with open(path, "rb") as f:
        magic = _need(f, len(MAGIC), "magic", path)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _need(f, 4, "version", path))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", _need(f, 8, "tensor count", path))
        for k in range(count):
            (name_len,) = struct.unpack("<I", _need(f, 4, f"name length of tensor {k}", path))
            name = _need(f, name_len, f"name of tensor {k}", path).decode("utf-8")
            (rank,) = struct.unpack("<Q", _need(f, 8, f"rank of {name}", path))
            if rank > 8:
                raise CheckpointError(f"{path}: implausible rank {rank} for {name}")
            dims = struct.unpack(f"<{rank}Q", _need(f, 8 * rank, f"dims of {name}", path)) if rank else ()
            n = 1
            for d in dims:
                n *= d
            raw = _need(f, 4 * n, f"data of {name}", path)
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after {count} tensors at byte {f.tell() - 1}")
    return out
