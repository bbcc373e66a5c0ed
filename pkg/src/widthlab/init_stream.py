"""Counter-based Gaussian stream for width-nested initialization.

Every row of every parameter block owns an independent Philox stream keyed by
``(seed, slot, layer, row)``. Entries are read as a prefix of that stream, so
the top-left block of a matrix is the same at every width.
"""
from __future__ import annotations

import numpy as np

WEIGHT_SLOT = 0
BIAS_SLOT = 1


def _row_generator(seed: int, slot: int, layer: int, row: int) -> np.random.Generator:
    if not (0 <= layer < 2**16 and 0 <= row < 2**40 and 0 <= slot < 256):
        raise ValueError("stream key out of range")
    key = np.array([seed & (2**64 - 1), (slot << 56) | (layer << 40) | row], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_row(seed: int, slot: int, layer: int, row: int, n: int) -> np.ndarray:
    """First ``n`` standard normals of the stream for one row."""
    return _row_generator(seed, slot, layer, row).standard_normal(n)


def gaussian_block(seed: int, slot: int, layer: int, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` block whose entry ``(j, q)`` depends only on the key and ``(j, q)``."""
    out = np.empty((rows, cols))
    for j in range(rows):
        out[j] = _row_generator(seed, slot, layer, j).standard_normal(cols)
    return out
