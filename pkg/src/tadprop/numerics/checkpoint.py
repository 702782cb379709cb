"""RTDW parameter checkpoints.

Layout (little-endian): b"RTDW", u32 version, u32 count, then per parameter
u16 name length, name bytes (utf-8), u8 rank, u32 per dim, f64 values in
row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTDW"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_params(named: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointFormatError("bad magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at byte 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        out[name] = vals.reshape(dims)
    return out


def save_params(path, named_params) -> None:
    """Write ``(name, Parameter)`` pairs (or a name->array dict) to ``path``."""
    items = named_params.items() if isinstance(named_params, dict) else named_params
    arrays = {n: (p.data if hasattr(p, "data") else p) for n, p in items}
    Path(path).write_bytes(encode_params(arrays))


def load_params(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


def assign_params(module, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy arrays into a module's parameters by name."""
    named = dict(module.named_parameters())
    missing = set(named) - set(arrays)
    if strict and missing:
        raise CheckpointFormatError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    for name, p in named.items():
        if name not in arrays:
            continue
        if arrays[name].shape != p.shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data[...] = arrays[name]
