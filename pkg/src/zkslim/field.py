"""Prime field used for circuit embedding.

Signed integers map to ``v mod P``; negatives land at ``P - |v|``.
"""

from __future__ import annotations

import numpy as np

P = 2**64 - 2**32 + 1
HALF = P // 2


def embed(v: int) -> int:
    return int(v) % P


def lift(x: int) -> int:
    """Inverse of :func:`embed` for values that started as small signed ints."""
    x = int(x) % P
    return x - P if x > HALF else x


def embed_array(values) -> np.ndarray:
    """Embed an integer array elementwise, returning ``uint64`` field elements."""
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr.copy()
    out = np.empty(arr.shape, dtype=np.uint64)
    flat = arr.reshape(-1)
    out_flat = out.reshape(-1)
    if arr.dtype.kind == "i":
        neg = flat < 0
        out_flat[~neg] = flat[~neg].astype(np.uint64)
        # P - |v| computed without leaving uint64
        out_flat[neg] = np.uint64(P) - (-flat[neg]).astype(np.uint64)
    else:
        for i, v in enumerate(flat.tolist()):
            out_flat[i] = int(v) % P
    return out


def lift_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.uint64)
    out = np.empty(arr.shape, dtype=np.int64)
    big = arr > np.uint64(HALF)
    out[~big] = arr[~big].astype(np.int64)
    out[big] = -((np.uint64(P) - arr[big]).astype(np.int64))
    return out
