"""In-process distributed join engine.

The cascade join runs five barrier-separated stages over a
:class:`~bloomjoin.data.PartitionedTable`:

1. approximate count of the (predicate-filtered) small table,
2. per-partition Bloom filters merged by a reduction tree,
3. broadcast of the merged filter,
4. pre-filtering of the big table by predicate and filter membership,
5. hash shuffle of both sides and a sort-merge join per shuffle partition.

Two baselines share the same inputs: a plain shuffle join (no filter) and a
broadcast hash join.  ``nested_loop_oracle`` is the brute-force ground truth.
"""

from __future__ import annotations

import math
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import bloom
from .bloom import BloomFilter, BloomParams
from .data import RESULT, PartitionedTable, Predicate, apply_predicate, sorted_records
from .errors import CapacityError, InvalidArgumentError
from .hashing import derive_seed, keyed_hash

__all__ = [
    "DEFAULT_SHUFFLE_PARTITIONS",
    "JoinConfig",
    "CountEstimate",
    "PhaseTimings",
    "BroadcastStats",
    "WorkerPool",
    "approx_count",
    "build_distributed_bloom",
    "broadcast",
    "filter_big_table",
    "partition_of",
    "shuffle",
    "sort_merge_join",
    "bloom_cascade_join",
    "baseline_shuffle_join",
    "baseline_broadcast_hash_join",
    "nested_loop_oracle",
    "filtrable_count",
    "ALGORITHMS",
    "run_join",
]

DEFAULT_SHUFFLE_PARTITIONS = 200

_BLOOM_STREAM = 0x5EED_B1
_SHUFFLE_STREAM = 0x5EED_5F
_COUNT_STREAM = 0x5EED_C0
_HASHMAP_STREAM = 0x5EED_4A


def default_threads() -> int:
    env = os.environ.get("BLOOMJOIN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class JoinConfig:
    epsilon: float = 0.01
    shuffle_partitions: int = DEFAULT_SHUFFLE_PARTITIONS
    count_budget: float = math.inf  # seconds
    worker_threads: int = field(default_factory=default_threads)
    safety_factor: float = 1.2
    seed: int = 0
    condition1: Predicate | None = None
    condition2: Predicate | None = None
    broadcast_max_rows: int = 1_000_000

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise InvalidArgumentError(f"epsilon must be in (0, 1], got {self.epsilon!r}")
        if self.shuffle_partitions < 1:
            raise InvalidArgumentError("shuffle_partitions must be >= 1")
        if self.worker_threads < 1:
            raise InvalidArgumentError("worker_threads must be >= 1")
        if not self.safety_factor >= 1.0:
            raise InvalidArgumentError(f"safety_factor must be >= 1, got {self.safety_factor!r}")
        if not self.count_budget > 0:
            raise InvalidArgumentError("count_budget must be positive")

    @property
    def bloom_seed(self) -> int:
        return derive_seed(self.seed, _BLOOM_STREAM)

    @property
    def shuffle_seed(self) -> int:
        return derive_seed(self.seed, _SHUFFLE_STREAM)


@dataclass(frozen=True)
class CountEstimate:
    estimate: int
    scanned_partitions: int
    total_partitions: int
    exact: bool


@dataclass
class PhaseTimings:
    """Per-phase wall-clock (milliseconds) and row accounting of one run."""

    t_count: float = 0.0
    t_bloom_build: float = 0.0
    t_broadcast: float = 0.0
    t_filter_join: float = 0.0
    bytes_broadcast: int = 0
    filtered_kept: int = 0
    filtered_dropped: int = 0
    result_rows: int = 0
    count_estimate: int = 0
    n_expected: int = 0
    m_bits: int = 0
    k_hashes: int = 0
    filter_bytes: int = 0
    shuffle_partitions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BroadcastStats:
    payload_bytes: int
    fanout_rounds: int
    bytes_broadcast: int
    replicas: tuple  # one shared reference per worker


class _Stopwatch:
    def __init__(self):
        self.elapsed_ms = 0.0

    def __enter__(self):
        self._t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc):
        self.elapsed_ms = (time.perf_counter_ns() - self._t0) / 1e6
        return False


class WorkerPool:
    """Thread pool whose ``map`` is a stage barrier; inline when one thread."""

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))
        self._executor = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn: Callable, items: Iterable) -> list:
        if self._executor is None:
            return [fn(x) for x in items]
        return list(self._executor.map(fn, items))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _as_pool(workers) -> tuple[WorkerPool, bool]:
    if isinstance(workers, WorkerPool):
        return workers, False
    return WorkerPool(workers), True


# -- step 1 --------------------------------------------------------------------

def approx_count(table: PartitionedTable, budget: float = math.inf, seed: int = 0,
                 clock: Callable[[], float] = time.perf_counter) -> CountEstimate:
    """Scan whole partitions in a seeded random order until ``budget`` seconds pass.

    At least one partition is always scanned.  The estimate extrapolates the
    rows seen by ``total / scanned`` partitions and rounds up.
    """
    total = table.num_partitions
    if total == 0:
        raise InvalidArgumentError("table has no partitions")
    order = list(range(total))
    random.Random(derive_seed(seed, _COUNT_STREAM)).shuffle(order)
    start = clock()
    rows = scanned = 0
    for idx in order:
        rows += len(table.partitions[idx])
        scanned += 1
        if scanned < total and clock() - start >= budget:
            break
    estimate = rows if scanned == total else math.ceil(rows * total / scanned)
    return CountEstimate(estimate, scanned, total, scanned == total)


# -- step 2 --------------------------------------------------------------------

def build_distributed_bloom(table: PartitionedTable, params: BloomParams,
                            workers: int | WorkerPool = 1) -> BloomFilter:
    """One private filter per partition, then a pairwise OR reduction tree."""
    pool, owned = _as_pool(workers)
    try:
        def build(part: np.ndarray) -> BloomFilter:
            bf = BloomFilter(params)
            bf.insert_many(part["key"])
            return bf

        level = pool.map(build, table.partitions)
        while len(level) > 1:
            pairs = [(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
            merged = pool.map(lambda ab: ab[0].merge(ab[1]), pairs)
            if len(level) % 2:
                merged.append(level[-1])
            level = merged
        return level[0]
    finally:
        if owned:
            pool.close()


# -- step 3 --------------------------------------------------------------------

def fanout_rounds(workers: int) -> int:
    """Peer-to-peer doubling rounds needed to reach ``workers`` holders."""
    return math.ceil(math.log2(max(2, workers)))


def broadcast(bf: BloomFilter, workers: int) -> BroadcastStats:
    """Serialize the filter once and hand every worker the decoded copy.

    Bytes are accounted as ``payload * ceil(log2(max(2, workers)))``; delivery
    itself is by shared reference.
    """
    payload = bf.to_bytes()
    received = BloomFilter.from_bytes(payload)
    rounds = fanout_rounds(workers)
    return BroadcastStats(len(payload), rounds, len(payload) * rounds,
                          tuple(received for _ in range(max(1, workers))))


# -- step 4 --------------------------------------------------------------------

def filter_big_table(big: PartitionedTable, bf: BloomFilter | None,
                     pred: Predicate | None = None,
                     workers: int | WorkerPool = 1) -> tuple[PartitionedTable, int, int]:
    """Keep records passing ``pred`` whose key may be in ``bf``.

    Returns ``(table, kept, dropped)``; ``kept + dropped`` is the number of
    records that pass ``pred``.  ``bf=None`` keeps every such record.
    """
    if pred is not None:
        big.schema.require(pred.column)
    pool, owned = _as_pool(workers)

    def run(part: np.ndarray) -> tuple[np.ndarray, int]:
        if pred is not None:
            part = part[pred.mask(part)]
        candidates = len(part)
        if bf is not None and candidates:
            part = part[bf.contains_many(part["key"])]
        elif bf is not None:
            part = part[:0]
        return part, candidates

    try:
        out = pool.map(run, big.partitions)
    finally:
        if owned:
            pool.close()
    kept = sum(len(p) for p, _ in out)
    survivors = sum(c for _, c in out)
    return PartitionedTable([p for p, _ in out], big.schema), kept, survivors - kept


# -- step 5 --------------------------------------------------------------------

def partition_of(keys: np.ndarray, num_partitions: int, seed: int = 0) -> np.ndarray:
    """Shuffle destination of each key: seeded key-only hash mod ``num_partitions``."""
    return (keyed_hash(keys, seed) % np.uint64(num_partitions)).astype(np.int64)


def shuffle(table: PartitionedTable, num_partitions: int, seed: int = 0) -> PartitionedTable:
    """Hash-partition records by key; relative order within a destination is kept."""
    if num_partitions < 1:
        raise InvalidArgumentError("num_partitions must be >= 1")
    records = table.concat()
    if num_partitions == 1:
        return PartitionedTable([records], table.schema)
    dest = partition_of(records["key"], num_partitions, seed)
    order = np.argsort(dest, kind="stable")
    counts = np.bincount(dest, minlength=num_partitions)
    parts = np.split(records[order], np.cumsum(counts)[:-1])
    return PartitionedTable(parts, table.schema)


def _result(keys, attr1, attr2) -> np.ndarray:
    out = np.empty(len(keys), dtype=RESULT.dtype)
    out["key"] = keys
    out["attribute1"] = attr1
    out["attribute2"] = attr2
    return out


def sort_merge_join(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Inner join of big-side ``left`` and small-side ``right`` records on ``key``.

    Both sides are sorted by key; each left record then finds the run of equal
    keys on the right, and every (left, right) pair in matching runs yields
    one ``(key, attribute1, attribute2)`` row.  Output is ordered by key.
    """
    if len(left) == 0 or len(right) == 0:
        return RESULT.empty()
    left = left[np.argsort(left["key"], kind="stable")]
    right = right[np.argsort(right["key"], kind="stable")]
    lk, rk = left["key"], right["key"]
    run_start = np.searchsorted(rk, lk, side="left")
    run_len = np.searchsorted(rk, lk, side="right") - run_start
    total = int(run_len.sum())
    if total == 0:
        return RESULT.empty()
    li = np.repeat(np.arange(len(left)), run_len)
    first = np.cumsum(run_len) - run_len
    ri = np.repeat(run_start - first, run_len) + np.arange(total)
    return _result(lk[li], left["attribute1"][li], right["attribute2"][ri])


def _shuffle_and_join(big: PartitionedTable, small: PartitionedTable, config: JoinConfig,
                      pool: WorkerPool) -> PartitionedTable:
    big_s = shuffle(big, config.shuffle_partitions, config.shuffle_seed)
    small_s = shuffle(small, config.shuffle_partitions, config.shuffle_seed)
    parts = pool.map(lambda i: sort_merge_join(big_s.partitions[i], small_s.partitions[i]),
                     range(config.shuffle_partitions))
    return PartitionedTable(parts, RESULT)


# -- full pipelines ------------------------------------------------------------

def bloom_cascade_join(big: PartitionedTable, small: PartitionedTable,
                       config: JoinConfig) -> tuple[PartitionedTable, PhaseTimings]:
    """Bloom-filtered cascade join; the result does not depend on ``epsilon``.

    ``epsilon == 1`` means a filter that passes everything, so the filter
    stages are skipped.
    """
    timings = PhaseTimings(shuffle_partitions=config.shuffle_partitions)
    with WorkerPool(config.worker_threads) as pool:
        with _Stopwatch() as sw:
            small_f = apply_predicate(small, config.condition2)
            est = approx_count(small_f, config.count_budget, config.seed)
        timings.t_count = sw.elapsed_ms
        timings.count_estimate = est.estimate

        shared: BloomFilter | None = None
        if config.epsilon < 1.0:
            with _Stopwatch() as sw:
                n_expected = max(1, math.ceil(est.estimate * config.safety_factor))
                params = bloom.plan_parameters(n_expected, config.epsilon, config.bloom_seed)
                bf = build_distributed_bloom(small_f, params, pool)
            timings.t_bloom_build = sw.elapsed_ms
            timings.n_expected = n_expected
            timings.m_bits = params.m_bits
            timings.k_hashes = params.k_hashes

            with _Stopwatch() as sw:
                stats = broadcast(bf, config.worker_threads)
            timings.t_broadcast = sw.elapsed_ms
            timings.filter_bytes = stats.payload_bytes
            timings.bytes_broadcast = stats.bytes_broadcast
            shared = stats.replicas[0]

        with _Stopwatch() as sw:
            big_f, kept, dropped = filter_big_table(big, shared, config.condition1, pool)
            result = _shuffle_and_join(big_f, small_f, config, pool)
        timings.t_filter_join = sw.elapsed_ms
    timings.filtered_kept = kept
    timings.filtered_dropped = dropped
    timings.result_rows = result.num_rows
    return result, timings


def baseline_shuffle_join(big: PartitionedTable, small: PartitionedTable,
                          config: JoinConfig) -> tuple[PartitionedTable, PhaseTimings]:
    """Predicates, shuffle, sort-merge join; no filter stages."""
    timings = PhaseTimings(shuffle_partitions=config.shuffle_partitions)
    with WorkerPool(config.worker_threads) as pool:
        with _Stopwatch() as sw:
            small_f = apply_predicate(small, config.condition2)
            big_f, kept, dropped = filter_big_table(big, None, config.condition1, pool)
            result = _shuffle_and_join(big_f, small_f, config, pool)
        timings.t_filter_join = sw.elapsed_ms
    timings.filtered_kept = kept
    timings.filtered_dropped = dropped
    timings.result_rows = result.num_rows
    return result, timings


class _BroadcastHashTable:
    """Chained hash table of small-side records laid out as CSR buckets."""

    def __init__(self, records: np.ndarray, seed: int):
        self.seed = seed
        self.capacity = 1 << max(1, math.ceil(math.log2(max(2, 2 * len(records)))))
        bucket = self._bucket(records["key"])
        order = np.argsort(bucket, kind="stable")
        self.records = records[order]
        self.offsets = np.zeros(self.capacity + 1, dtype=np.int64)
        np.cumsum(np.bincount(bucket, minlength=self.capacity), out=self.offsets[1:])

    def _bucket(self, keys: np.ndarray) -> np.ndarray:
        return (keyed_hash(keys, self.seed) & np.uint64(self.capacity - 1)).astype(np.int64)

    @property
    def nbytes(self) -> int:
        return self.records.nbytes + self.offsets.nbytes

    def probe(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(probe_index, build_index)`` for every matching pair."""
        b = self._bucket(keys)
        start = self.offsets[b]
        size = self.offsets[b + 1] - start
        total = int(size.sum())
        pi = np.repeat(np.arange(len(keys)), size)
        first = np.cumsum(size) - size
        bi = np.repeat(start - first, size) + np.arange(total)
        hit = self.records["key"][bi] == keys[pi]
        return pi[hit], bi[hit]


def baseline_broadcast_hash_join(big: PartitionedTable, small: PartitionedTable,
                                 config: JoinConfig) -> tuple[PartitionedTable, PhaseTimings]:
    """Ship a hash map of the small side to every worker and stream the big side.

    Raises :class:`CapacityError` when the filtered small side exceeds
    ``config.broadcast_max_rows``.
    """
    timings = PhaseTimings()
    with WorkerPool(config.worker_threads) as pool:
        with _Stopwatch() as sw:
            small_f = apply_predicate(small, config.condition2).concat()
            if len(small_f) > config.broadcast_max_rows:
                raise CapacityError(
                    f"small side has {len(small_f)} rows, broadcast cap is "
                    f"{config.broadcast_max_rows}; use the cascade join"
                )
            table = _BroadcastHashTable(small_f, derive_seed(config.seed, _HASHMAP_STREAM))
        timings.t_broadcast = sw.elapsed_ms
        timings.bytes_broadcast = table.nbytes * fanout_rounds(config.worker_threads)

        def probe(part: np.ndarray) -> np.ndarray:
            if config.condition1 is not None:
                part = part[config.condition1.mask(part)]
            if len(part) == 0 or len(small_f) == 0:
                return RESULT.empty()
            pi, bi = table.probe(part["key"])
            return _result(part["key"][pi], part["attribute1"][pi], table.records["attribute2"][bi])

        with _Stopwatch() as sw:
            if config.condition1 is not None:
                big.schema.require(config.condition1.column)
            parts = pool.map(probe, big.partitions)
        timings.t_filter_join = sw.elapsed_ms
    result = PartitionedTable(parts, RESULT)
    survivors = apply_predicate(big, config.condition1).num_rows
    timings.filtered_kept = survivors
    timings.result_rows = result.num_rows
    return result, timings


ALGORITHMS = {
    "cascade": bloom_cascade_join,
    "shuffle": baseline_shuffle_join,
    "broadcast": baseline_broadcast_hash_join,
}


def run_join(algorithm: str, big: PartitionedTable, small: PartitionedTable,
             config: JoinConfig) -> tuple[PartitionedTable, PhaseTimings]:
    try:
        fn = ALGORITHMS[algorithm]
    except KeyError:
        raise InvalidArgumentError(f"unknown algorithm {algorithm!r}; choose from {sorted(ALGORITHMS)}") from None
    return fn(big, small, config)


# -- ground truth --------------------------------------------------------------

_ORACLE_BLOCK = 1 << 22


def nested_loop_oracle(big: PartitionedTable, small: PartitionedTable,
                       condition1: Predicate | None = None,
                       condition2: Predicate | None = None) -> np.ndarray:
    """Brute-force join: compare every big key with every small key.

    Works in blocks of big rows so the comparison matrix stays bounded.
    Returns the result in canonical (fully sorted) order.
    """
    b = big.concat()
    s = small.concat()
    if condition1 is not None:
        b = b[condition1.mask(b)]
    if condition2 is not None:
        s = s[condition2.mask(s)]
    if len(b) == 0 or len(s) == 0:
        return RESULT.empty()
    step = max(1, _ORACLE_BLOCK // len(s))
    chunks = []
    sk = s["key"]
    for lo in range(0, len(b), step):
        block = b[lo:lo + step]
        bi, si = np.nonzero(block["key"][:, None] == sk[None, :])
        if len(bi):
            chunks.append(_result(block["key"][bi], block["attribute1"][bi], s["attribute2"][si]))
    if not chunks:
        return RESULT.empty()
    return sorted_records(np.concatenate(chunks))


def filtrable_count(big: PartitionedTable, small: PartitionedTable,
                    condition1: Predicate | None = None,
                    condition2: Predicate | None = None) -> tuple[int, int]:
    """``(N_filtrable, true_candidates)`` among big records passing ``condition1``.

    ``N_filtrable`` counts records whose key is absent from the filtered small
    table; ``true_candidates`` counts the rest.
    """
    b = apply_predicate(big, condition1).keys()
    s = apply_predicate(small, condition2).keys()
    present = np.isin(b, s)
    return int(len(b) - present.sum()), int(present.sum())
