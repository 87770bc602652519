"""TPC-H-like Orders/Lineitem tables, predicates, partitioning and CSV I/O.

Records are rows of numpy structured arrays with ``int64`` columns; a
``PartitionedTable`` is an ordered list of such arrays plus a schema.  The
join query this package evaluates is::

    SELECT big.attribute1, small.attribute2
    FROM big JOIN small ON big.key = small.key
    WHERE condition1(big.attribute3) AND condition2(small.attribute4)

Lineitem plays the big table and Orders the small one.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CsvParseError, InvalidArgumentError, SchemaError

__all__ = [
    "ATTR_DOMAIN",
    "ORDERS_PER_SCALE_FACTOR",
    "DEFAULT_PARTITION_BYTES",
    "Schema",
    "ORDERS",
    "LINEITEM",
    "GENERIC",
    "RESULT",
    "PartitionedTable",
    "Predicate",
    "condition1",
    "condition2",
    "GenConfig",
    "generate",
    "apply_predicate",
    "ByCount",
    "ByBytes",
    "by_count",
    "by_bytes",
    "partition",
    "csv_row_widths",
    "write_csv",
    "load_csv",
    "sorted_records",
]

# Predicate attributes are uniform on [0, ATTR_DOMAIN), so a threshold of
# sel * ATTR_DOMAIN keeps a fraction sel of the rows.
ATTR_DOMAIN = 1_000_000
ORDERS_PER_SCALE_FACTOR = 1_500_000
DEFAULT_PARTITION_BYTES = 128 * 1024 * 1024


@dataclass(frozen=True)
class Schema:
    name: str
    columns: tuple[str, ...]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype([(c, "<i8") for c in self.columns])

    def require(self, column: str) -> None:
        if column not in self.columns:
            raise SchemaError(f"schema {self.name!r} has no column {column!r} (has {self.columns})")

    def empty(self) -> np.ndarray:
        return np.empty(0, dtype=self.dtype)


# attribute2 ~ o_totalprice (cents), attribute4 ~ filterable order attribute
ORDERS = Schema("orders", ("key", "attribute2", "attribute4"))
# attribute1 ~ l_extendedprice (cents), attribute3 ~ filterable line attribute
LINEITEM = Schema("lineitem", ("key", "linenumber", "attribute1", "attribute3"))
GENERIC = Schema("generic", ("key", "attribute1", "attribute2", "attribute3", "attribute4"))
RESULT = Schema("result", ("key", "attribute1", "attribute2"))

SCHEMAS = {s.name: s for s in (ORDERS, LINEITEM, GENERIC, RESULT)}


@dataclass(frozen=True)
class PartitionedTable:
    """Keyed records split into partitions; every record lives in exactly one."""

    partitions: list[np.ndarray]
    schema: Schema

    def __post_init__(self):
        if not self.partitions:
            raise InvalidArgumentError("a table needs at least one partition")
        dtype = self.schema.dtype
        for p in self.partitions:
            if p.dtype != dtype:
                raise SchemaError(f"partition dtype {p.dtype} does not match schema {self.schema.name!r}")

    @classmethod
    def from_array(cls, records: np.ndarray, schema: Schema, policy=None) -> "PartitionedTable":
        table = cls([np.ascontiguousarray(records)], schema)
        return table if policy is None else partition(table, policy)

    @classmethod
    def from_columns(cls, schema: Schema, num_partitions: int = 1, **columns) -> "PartitionedTable":
        n = len(columns["key"])
        arr = np.empty(n, dtype=schema.dtype)
        for c in schema.columns:
            arr[c] = columns.get(c, 0)
        return partition(cls([arr], schema), ByCount(num_partitions))

    @property
    def num_partitions(self) -> int:
        return len(self.partitions)

    @property
    def num_rows(self) -> int:
        return sum(len(p) for p in self.partitions)

    def __len__(self) -> int:
        return self.num_rows

    def concat(self) -> np.ndarray:
        if len(self.partitions) == 1:
            return self.partitions[0]
        return np.concatenate(self.partitions)

    def keys(self) -> np.ndarray:
        return self.concat()["key"]

    def to_bytes(self) -> bytes:
        """Stable byte image including partition boundaries (for determinism checks)."""
        buf = io.BytesIO()
        buf.write(self.schema.name.encode())
        for p in self.partitions:
            buf.write(len(p).to_bytes(8, "little"))
            buf.write(p.tobytes())
        return buf.getvalue()


def sorted_records(records: np.ndarray | PartitionedTable) -> np.ndarray:
    """Canonical order (lexicographic over all columns) for multiset comparison."""
    arr = records.concat() if isinstance(records, PartitionedTable) else records
    if len(arr) == 0:
        return arr
    cols = arr.dtype.names
    order = np.lexsort([arr[c] for c in reversed(cols)])
    return arr[order]


# -- predicates ----------------------------------------------------------------

@dataclass(frozen=True)
class Predicate:
    """``record[column] < threshold``."""

    column: str
    threshold: int

    @classmethod
    def with_selectivity(cls, column: str, selectivity: float) -> "Predicate":
        if not (0.0 < selectivity <= 1.0):
            raise InvalidArgumentError(f"selectivity must be in (0, 1], got {selectivity!r}")
        return cls(column, int(round(selectivity * ATTR_DOMAIN)))

    @property
    def selectivity(self) -> float:
        return self.threshold / ATTR_DOMAIN

    def mask(self, records: np.ndarray) -> np.ndarray:
        return records[self.column] < self.threshold


def condition1(selectivity: float) -> Predicate:
    """Big-table predicate on ``attribute3``."""
    return Predicate.with_selectivity("attribute3", selectivity)


def condition2(selectivity: float) -> Predicate:
    """Small-table predicate on ``attribute4``."""
    return Predicate.with_selectivity("attribute4", selectivity)


_CONDITIONS = {"condition1": condition1, "condition2": condition2}


def apply_predicate(table: PartitionedTable, which: str | Predicate | None,
                    selectivity: float = 1.0) -> PartitionedTable:
    """Keep records satisfying a threshold predicate; partition layout is kept.

    ``which`` is a :class:`Predicate`, or ``"condition1"``/``"condition2"``
    together with ``selectivity``.  ``None`` keeps everything.
    """
    if which is None:
        return table
    if isinstance(which, str):
        try:
            pred = _CONDITIONS[which](selectivity)
        except KeyError:
            raise InvalidArgumentError(f"unknown condition {which!r}") from None
    else:
        pred = which
    table.schema.require(pred.column)
    if pred.threshold >= ATTR_DOMAIN:
        return table
    return PartitionedTable([p[pred.mask(p)] for p in table.partitions], table.schema)


# -- generation ----------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    scale_factor: float = 0.01
    seed: int = 42
    lines_per_order: tuple[int, int] = (1, 7)
    sel_big: float = 1.0
    sel_small: float = 1.0
    partition_bytes: int = DEFAULT_PARTITION_BYTES

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise InvalidArgumentError(f"scale_factor must be positive, got {self.scale_factor!r}")
        lo, hi = self.lines_per_order
        if not 1 <= lo <= hi:
            raise InvalidArgumentError(f"invalid lines_per_order range {self.lines_per_order}")
        for name in ("sel_big", "sel_small"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidArgumentError(f"{name} must be in (0, 1], got {v!r}")
        if self.partition_bytes < 1:
            raise InvalidArgumentError("partition_bytes must be >= 1")

    @property
    def num_orders(self) -> int:
        return int(round(self.scale_factor * ORDERS_PER_SCALE_FACTOR))

    def condition1(self) -> Predicate:
        return condition1(self.sel_big)

    def condition2(self) -> Predicate:
        return condition2(self.sel_small)


def generate(config: GenConfig) -> tuple[PartitionedTable, PartitionedTable]:
    """Build ``(orders, lineitem)`` deterministically from ``config``.

    Orders keys are ``1..N`` with ``N = round(SF * 1.5M)``; each order gets a
    uniform number of lines from ``lines_per_order``.
    """
    rng = np.random.default_rng(config.seed)
    n = config.num_orders
    orders = np.empty(n, dtype=ORDERS.dtype)
    orders["key"] = np.arange(1, n + 1, dtype=np.int64)
    orders["attribute2"] = rng.integers(90_000, 55_000_000, size=n)
    orders["attribute4"] = rng.integers(0, ATTR_DOMAIN, size=n)

    lo, hi = config.lines_per_order
    counts = rng.integers(lo, hi + 1, size=n)
    total = int(counts.sum())
    lineitem = np.empty(total, dtype=LINEITEM.dtype)
    lineitem["key"] = np.repeat(orders["key"], counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    lineitem["linenumber"] = np.arange(total) - starts + 1
    lineitem["attribute1"] = rng.integers(90_000, 10_500_000, size=total)
    lineitem["attribute3"] = rng.integers(0, ATTR_DOMAIN, size=total)

    policy = ByBytes(config.partition_bytes)
    return (partition(PartitionedTable([orders], ORDERS), policy),
            partition(PartitionedTable([lineitem], LINEITEM), policy))


# -- partitioning --------------------------------------------------------------

@dataclass(frozen=True)
class ByCount:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError(f"partition count must be >= 1, got {self.n}")


@dataclass(frozen=True)
class ByBytes:
    target: int = DEFAULT_PARTITION_BYTES

    def __post_init__(self):
        if self.target < 1:
            raise InvalidArgumentError(f"target partition size must be >= 1 byte, got {self.target}")


def by_count(n: int) -> ByCount:
    return ByCount(n)


def by_bytes(target: int = DEFAULT_PARTITION_BYTES) -> ByBytes:
    return ByBytes(target)


_POW10 = np.array([10**i for i in range(1, 19)], dtype=np.uint64)


def _decimal_width(values: np.ndarray) -> np.ndarray:
    v = values.astype(np.int64, copy=False)
    neg = v < 0
    mag = np.where(neg, -(v + 1), v).astype(np.uint64) + neg.astype(np.uint64)
    return 1 + np.searchsorted(_POW10, mag, side="right") + neg


def csv_row_widths(records: np.ndarray) -> np.ndarray:
    """Byte length of each record as written by :func:`write_csv` (newline included)."""
    names = records.dtype.names
    width = np.full(len(records), len(names), dtype=np.int64)  # commas + newline
    for c in names:
        width += _decimal_width(records[c])
    return width


def partition(table: PartitionedTable, policy: ByCount | ByBytes) -> PartitionedTable:
    """Redistribute records into contiguous partitions, preserving order."""
    records = table.concat()
    if isinstance(policy, ByCount):
        parts = np.array_split(records, policy.n)
    elif isinstance(policy, ByBytes):
        if len(records) == 0:
            parts = [records]
        else:
            widths = csv_row_widths(records)
            start_offsets = np.cumsum(widths) - widths
            bucket = start_offsets // policy.target
            cuts = np.flatnonzero(np.diff(bucket)) + 1
            parts = np.split(records, cuts)
    else:
        raise InvalidArgumentError(f"unknown partition policy {policy!r}")
    return PartitionedTable([np.ascontiguousarray(p) for p in parts], table.schema)


# -- CSV -----------------------------------------------------------------------

def write_csv(table: PartitionedTable | np.ndarray, path: str | os.PathLike,
              schema: Schema | None = None) -> None:
    """Comma-separated, header row, decimal integers."""
    records = table.concat() if isinstance(table, PartitionedTable) else table
    names = records.dtype.names
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(names) + "\n")
        if len(records):
            matrix = np.column_stack([records[c] for c in names])
            np.savetxt(fh, matrix, fmt="%d", delimiter=",")


def load_csv(path: str | os.PathLike, schema: Schema,
             policy: ByCount | ByBytes | None = None) -> PartitionedTable:
    """Read a CSV written by :func:`write_csv`.

    Raises :class:`CsvParseError` naming the offending line on any malformed row.
    """
    path = Path(path)
    rows: list[list[int]] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvParseError(path, 1, "missing header row")
        if tuple(h.strip() for h in header) != schema.columns:
            raise CsvParseError(path, 1, f"header {header} does not match schema columns {list(schema.columns)}")
        ncols = len(schema.columns)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != ncols:
                raise CsvParseError(path, line, f"expected {ncols} fields, got {len(row)}")
            try:
                values = [int(v) for v in row]
            except ValueError as exc:
                raise CsvParseError(path, line, f"non-integer field ({exc})") from None
            if values[0] < 1:
                raise CsvParseError(path, line, f"key must be >= 1, got {values[0]}")
            rows.append(values)
    records = np.empty(len(rows), dtype=schema.dtype)
    if rows:
        matrix = np.array(rows, dtype=np.int64)
        for i, c in enumerate(schema.columns):
            records[c] = matrix[:, i]
    return PartitionedTable.from_array(records, schema, policy)
