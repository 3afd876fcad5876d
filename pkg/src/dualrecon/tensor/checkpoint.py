"""DTCK checkpoint files.

Layout (little endian): magic ``DTCK``, version u16, then records until EOF,
each ``name_len u32 | name utf-8 | dtype u8 | rank u8 | extents u64*rank | payload``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 6, {}
    while pos < len(buf):
        try:
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
            pos += count * dt.itemsize
        except (struct.error, KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt record at byte {pos}") from exc
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out
