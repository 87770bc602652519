"""Mergeable Bloom filter sized from the expected key count and target error rate.

Bit positions come from double hashing: two seeded 64-bit hashes ``h1``, ``h2``
of the key give ``(h1 + i*h2) mod m`` for ``i in range(k)``.  Partition-local
filters built with the same parameters merge by bitwise OR, and the result is
bit-identical to a filter built from the union of their keys.

Wire format (little-endian)::

    u64 m_bits | u32 k_hashes | u64 hash_seed | u64 inserted_count | bits

with bits packed LSB-first into ``ceil(m_bits / 8)`` bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DeserializationError, IncompatibleFilterError, InvalidArgumentError
from .hashing import as_uint64, derive_seed, keyed_hash

__all__ = [
    "BITS_PER_KEY_FACTOR",
    "BloomParams",
    "BloomFilter",
    "plan_parameters",
    "insert",
    "contains",
    "merge",
    "merge_all",
    "serialize",
    "deserialize",
    "HEADER",
]

BITS_PER_KEY_FACTOR = 1.44
HEADER = struct.Struct("<QIQQ")

_H1_STREAM = 0xB100
_H2_STREAM = 0xB200
_CHUNK = 1 << 16


@dataclass(frozen=True)
class BloomParams:
    """Filter geometry.

    ``n_expected`` and ``epsilon`` record how the filter was planned.  They are
    not part of the wire format, so a deserialized filter carries ``None``
    for both; only ``(m_bits, k_hashes, hash_seed)`` decide bit positions.
    """

    n_expected: int | None
    epsilon: float | None
    m_bits: int
    k_hashes: int
    hash_seed: int = 0

    def __post_init__(self):
        if self.m_bits < 1 or self.k_hashes < 1:
            raise InvalidArgumentError(
                f"m_bits and k_hashes must be >= 1, got {self.m_bits}, {self.k_hashes}"
            )
        if not 0 <= self.hash_seed < 2**64:
            raise InvalidArgumentError("hash_seed must fit in 64 bits")

    @property
    def geometry(self) -> tuple[int, int, int]:
        return (self.m_bits, self.k_hashes, self.hash_seed)

    def compatible_with(self, other: "BloomParams") -> bool:
        return self.geometry == other.geometry

    @property
    def payload_bytes(self) -> int:
        return HEADER.size + (self.m_bits + 7) // 8


def plan_parameters(n_expected: int, epsilon: float, hash_seed: int = 0) -> BloomParams:
    """Size a filter for ``n_expected`` keys at false-positive rate ``epsilon``.

    ``m = ceil(n * 1.44 * log2(1/epsilon))`` and ``k = round((m/n) * ln 2)``.

    >>> p = plan_parameters(1000, 0.01)
    >>> p.m_bits, p.k_hashes
    (9568, 7)
    """
    if isinstance(n_expected, bool) or int(n_expected) != n_expected or n_expected < 1:
        raise InvalidArgumentError(f"n_expected must be a positive integer, got {n_expected!r}")
    if not (0.0 < epsilon < 1.0):
        raise InvalidArgumentError(f"epsilon must be in (0, 1), got {epsilon!r}")
    n_expected = int(n_expected)
    m_bits = max(1, math.ceil(n_expected * BITS_PER_KEY_FACTOR * math.log2(1.0 / epsilon)))
    k_hashes = max(1, round((m_bits / n_expected) * math.log(2)))
    return BloomParams(n_expected, float(epsilon), m_bits, k_hashes, int(hash_seed))


def _positions(params: BloomParams, keys: np.ndarray) -> np.ndarray:
    """Bit positions, shape ``(len(keys), k_hashes)``."""
    m = np.uint64(params.m_bits)
    h1 = keyed_hash(keys, derive_seed(params.hash_seed, _H1_STREAM)) % m
    h2 = keyed_hash(keys, derive_seed(params.hash_seed, _H2_STREAM)) % m
    i = np.arange(params.k_hashes, dtype=np.uint64)
    # h1, h2 < m so the sum stays far below 2**64 for any realistic m.
    return (h1[:, None] + i[None, :] * h2[:, None]) % m


def _as_keys(keys) -> np.ndarray:
    if not isinstance(keys, np.ndarray):
        keys = np.asarray(list(keys), dtype=np.int64)
    return as_uint64(keys)


class BloomFilter:
    """Bloom filter over 64-bit integer keys.

    A filter is meant to be filled by a single owner and then treated as
    immutable; ``merge`` never mutates its inputs.
    """

    __slots__ = ("params", "bits", "inserted_count")

    def __init__(self, params: BloomParams, bits: np.ndarray | None = None, inserted_count: int = 0):
        self.params = params
        if bits is None:
            bits = np.zeros(params.m_bits, dtype=np.bool_)
        elif bits.shape != (params.m_bits,) or bits.dtype != np.bool_:
            raise InvalidArgumentError("bits must be a bool array of length m_bits")
        self.bits = bits
        self.inserted_count = int(inserted_count)

    @classmethod
    def plan(cls, n_expected: int, epsilon: float, hash_seed: int = 0) -> "BloomFilter":
        return cls(plan_parameters(n_expected, epsilon, hash_seed))

    def insert(self, key: int) -> None:
        self.insert_many(np.array([key], dtype=np.int64))

    def insert_many(self, keys: Iterable[int] | np.ndarray) -> None:
        keys = _as_keys(keys)
        for start in range(0, len(keys), _CHUNK):
            self.bits[_positions(self.params, keys[start:start + _CHUNK]).ravel()] = True
        self.inserted_count += len(keys)

    def contains(self, key: int) -> bool:
        return bool(self.contains_many(np.array([key], dtype=np.int64))[0])

    __contains__ = contains

    def contains_many(self, keys: Iterable[int] | np.ndarray) -> np.ndarray:
        keys = _as_keys(keys)
        out = np.empty(len(keys), dtype=np.bool_)
        for start in range(0, len(keys), _CHUNK):
            pos = _positions(self.params, keys[start:start + _CHUNK])
            out[start:start + len(pos)] = self.bits[pos].all(axis=1)
        return out

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def expected_fpr(self, n: int | None = None) -> float:
        """Theoretical false-positive rate ``(1 - exp(-k n / m))**k``."""
        n = self.inserted_count if n is None else n
        k, m = self.params.k_hashes, self.params.m_bits
        return (1.0 - math.exp(-k * n / m)) ** k

    def merge(self, other: "BloomFilter") -> "BloomFilter":
        if not self.params.compatible_with(other.params):
            raise IncompatibleFilterError(
                f"cannot merge filters with geometry {self.params.geometry} and {other.params.geometry}"
            )
        return BloomFilter(self.params, self.bits | other.bits,
                           self.inserted_count + other.inserted_count)

    def to_bytes(self) -> bytes:
        p = self.params
        head = HEADER.pack(p.m_bits, p.k_hashes, p.hash_seed, self.inserted_count)
        return head + np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BloomFilter":
        if len(blob) < HEADER.size:
            raise DeserializationError(f"need at least {HEADER.size} header bytes, got {len(blob)}")
        m_bits, k_hashes, seed, count = HEADER.unpack_from(blob)
        if m_bits < 1 or k_hashes < 1:
            raise DeserializationError(f"corrupt header: m_bits={m_bits}, k_hashes={k_hashes}")
        body = len(blob) - HEADER.size
        if body != (m_bits + 7) // 8:
            raise DeserializationError(
                f"body is {body} bytes but m_bits={m_bits} needs {(m_bits + 7) // 8}"
            )
        bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=HEADER.size),
                             bitorder="little")
        if bits[m_bits:].any():
            raise DeserializationError("padding bits past m_bits are set")
        params = BloomParams(None, None, m_bits, k_hashes, seed)
        return cls(params, bits[:m_bits].astype(np.bool_), count)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BloomFilter):
            return NotImplemented
        return (self.params.geometry == other.params.geometry
                and self.inserted_count == other.inserted_count
                and np.array_equal(self.bits, other.bits))

    __hash__ = None

    def __repr__(self) -> str:
        p = self.params
        return (f"BloomFilter(m_bits={p.m_bits}, k_hashes={p.k_hashes}, "
                f"inserted={self.inserted_count}, set_bits={self.popcount()})")


def insert(bf: BloomFilter, key: int) -> None:
    bf.insert(key)


def contains(bf: BloomFilter, key: int) -> bool:
    return bf.contains(key)


def merge(a: BloomFilter, b: BloomFilter) -> BloomFilter:
    return a.merge(b)


def merge_all(filters: list[BloomFilter]) -> BloomFilter:
    """Pairwise reduction tree; order does not affect the result."""
    if not filters:
        raise InvalidArgumentError("nothing to merge")
    level = list(filters)
    while len(level) > 1:
        nxt = [level[i].merge(level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def serialize(bf: BloomFilter) -> bytes:
    return bf.to_bytes()


def deserialize(blob: bytes) -> BloomFilter:
    return BloomFilter.from_bytes(blob)
