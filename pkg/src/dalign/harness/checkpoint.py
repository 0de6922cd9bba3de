"""DALC checkpoint files: a named table of float32 parameters.

Layout (little-endian): magic ``DALC``, version u16, entry count u32, then per
entry: name length u32, UTF-8 name, ndim u32, ndim x u32 shape, float32
payload. Entries are written in sorted name order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DALC"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(params: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f4")  # keeps 0-d shapes; tobytes is C order
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return out
