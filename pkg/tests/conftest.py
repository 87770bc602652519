import numpy as np
import pytest

from bloomjoin.data import LINEITEM, ORDERS, PartitionedTable, by_count, partition

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the terminal summary."""

    def record(label: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA.append((label, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {label} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {label}  {detail}")


def make_tables(rng, n_big, n_small, big_key_range, small_key_range,
                big_parts=1, small_parts=1, unique_small=False, unique_big=False):
    """Random lineitem-shaped big table and orders-shaped small table."""
    if unique_big:
        bkeys = rng.choice(np.arange(1, big_key_range + 1), size=n_big, replace=False)
    else:
        bkeys = rng.integers(1, big_key_range + 1, size=n_big)
    if unique_small:
        skeys = rng.choice(np.arange(1, small_key_range + 1), size=n_small, replace=False)
    else:
        skeys = rng.integers(1, small_key_range + 1, size=n_small)
    big = np.empty(n_big, dtype=LINEITEM.dtype)
    big["key"] = bkeys
    big["linenumber"] = 1
    big["attribute1"] = rng.integers(0, 10**9, size=n_big)
    big["attribute3"] = rng.integers(0, 10**6, size=n_big)
    small = np.empty(n_small, dtype=ORDERS.dtype)
    small["key"] = skeys
    small["attribute2"] = rng.integers(0, 10**9, size=n_small)
    small["attribute4"] = rng.integers(0, 10**6, size=n_small)
    return (partition(PartitionedTable([big], LINEITEM), by_count(big_parts)),
            partition(PartitionedTable([small], ORDERS), by_count(small_parts)))


def random_fixture(seed, max_big=100_000, max_small=10_000):
    """Log-uniform sizes, overlapping key ranges, duplicates on both sides."""
    rng = np.random.default_rng(seed)
    n_big = int(np.exp(rng.uniform(0, np.log(max_big))))
    n_small = int(np.exp(rng.uniform(0, np.log(max_small))))
    small_range = max(1, int(n_small * rng.uniform(0.5, 3.0)))
    big_range = max(1, int(small_range * rng.uniform(0.5, 6.0)))
    return make_tables(rng, n_big, n_small, big_range, small_range,
                       big_parts=int(rng.integers(1, 17)), small_parts=int(rng.integers(1, 9)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
