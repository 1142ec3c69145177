"""Single-tensor binary container.

Layout (little-endian)::

    b"TSTN" | u32 rank | u64 dim * rank | f64 payload (C order)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSTN"


class ContainerError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ContainerError("bad magic; not a TSTN container")
    (rank,) = struct.unpack_from("<I", data, 4)
    off = 8 + 8 * rank
    if len(data) < off:
        raise ContainerError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(data) - off != 8 * count:
        raise ContainerError(
            f"payload holds {(len(data) - off) // 8} values, header declares {count}"
        )
    return np.frombuffer(data, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def save(path, array) -> None:
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
