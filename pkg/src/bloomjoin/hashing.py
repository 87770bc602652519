"""Seeded 64-bit key mixing shared by the Bloom filter and the shuffle.

Everything here operates on ``uint64`` numpy arrays; multiplication wraps
modulo 2**64, which is exactly the arithmetic the mixers rely on.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

MASK64 = (1 << 64) - 1


def mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64_int(x: int) -> int:
    """Pure-integer splitmix64 finalizer (reference path, no numpy)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Split one user seed into independent per-purpose 64-bit seeds."""
    return mix64_int((seed ^ mix64_int(stream)) & MASK64)


def as_uint64(keys) -> np.ndarray:
    """View signed or unsigned integer keys as uint64 (two's complement)."""
    arr = np.asarray(keys)
    if arr.dtype == np.uint64:
        return arr
    return arr.astype(np.int64, copy=False).view(np.uint64)


def keyed_hash(keys, seed: int) -> np.ndarray:
    """Seeded 64-bit hash of each key."""
    return mix64(as_uint64(keys) ^ np.uint64(seed))
