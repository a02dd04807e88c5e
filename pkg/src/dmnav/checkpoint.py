"""Flat binary parameter checkpoints.

Layout: magic ``DMNV1``, u32 version, u64 tensor count; per tensor a u64
name length + UTF-8 name, u64 rank, u64 dims, then raw little-endian
float32 data. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DMNV1"
VERSION = 1


class CheckpointFormatError(RuntimeError):
    pass


def save_params(path, named: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(named)))
        for name, arr in named.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError("truncated checkpoint file")
    return buf


def load_params(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(fh, 8))
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
            dims = struct.unpack("<" + "Q" * rank, _read_exact(fh, 8 * rank))
            size = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * size)
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return out


def save_model(path, model, prefix: str = ""):
    named = {name: p.data for name, p in model.named_parameters()
             if not prefix or name.startswith(prefix)}
    save_params(path, named)


def load_model(path, model, prefix: str = "", strict: bool = True):
    stored = load_params(path)
    params = {name: p for name, p in model.named_parameters()
              if not prefix or name.startswith(prefix)}
    missing = set(params) - set(stored)
    if strict and missing:
        raise CheckpointFormatError(f"checkpoint missing {len(missing)} parameters")
    for name, arr in stored.items():
        p = params.get(name)
        if p is None:
            if strict:
                raise CheckpointFormatError(f"unexpected parameter {name!r}")
            continue
        if tuple(p.data.shape) != tuple(arr.shape):
            raise CheckpointFormatError(
                f"shape mismatch for {name!r}: {arr.shape} vs {tuple(p.data.shape)}"
            )
        p.data = arr.astype(p.data.dtype)
