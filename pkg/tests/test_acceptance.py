"""Acceptance criteria, one test each; run with ``-s`` to see the PASS/FAIL lines."""

import csv
import math
import time

import numpy as np
import pytest

from bloomjoin import bench
from bloomjoin.bloom import BloomFilter, merge, plan_parameters
from bloomjoin.costmodel import (EPS_MIN, BloomTimeModelEps, JoinTimeModel, eval_join_model,
                                 fit_bloom_model, fit_join_model, model_total,
                                 solve_optimal_epsilon, total_derivative)
from bloomjoin.data import condition1, condition2, sorted_records
from bloomjoin.engine import (JoinConfig, baseline_broadcast_hash_join, baseline_shuffle_join,
                              bloom_cascade_join, filtrable_count, nested_loop_oracle)

from conftest import make_tables, random_fixture
from oracles import bisection_optimum, mp_central_difference, params_of, random_models


def test_c01_join_correctness(criterion):
    epsilons = (1e-4, 0.01, 0.1, 0.5, 1.0 - EPS_MIN)
    algorithms = (bloom_cascade_join, baseline_shuffle_join, baseline_broadcast_hash_join)
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(100):
        big, small = random_fixture(1000 + seed)
        rng = np.random.default_rng(seed)
        c1 = condition1(float(rng.uniform(0.05, 1.0)))
        c2 = condition2(float(rng.uniform(0.05, 1.0)))
        oracle = nested_loop_oracle(big, small, c1, c2)
        for eps in epsilons:
            cfg = JoinConfig(epsilon=eps, condition1=c1, condition2=c2, seed=seed, worker_threads=1)
            for algo in algorithms:
                result, _ = algo(big, small, cfg)
                if not np.array_equal(sorted_records(result), oracle):
                    mismatches.append((seed, eps, algo.__name__))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 60
    criterion("C1 join correctness", ok,
              f"100 fixtures x 5 eps x 3 algorithms, {len(mismatches)} mismatches, {elapsed:.1f}s")
    assert not mismatches, mismatches[:5]
    assert elapsed < 60


def test_c02_no_false_negatives(criterion):
    rng = np.random.default_rng(2)
    keys = rng.integers(-2**63, 2**63 - 1, size=10**6, dtype=np.int64)
    bf = BloomFilter.plan(len(keys), 0.01, hash_seed=2)
    bf.insert_many(keys)
    hits = int(bf.contains_many(keys).sum())
    criterion("C2 no false negatives", hits == len(keys), f"{hits}/{len(keys)} members found")
    assert hits == len(keys)


def test_c03_fpr_calibration(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    keys = rng.choice(2**40, size=10**5, replace=False)
    probes = rng.integers(2**40, 2**41, size=10**6)  # disjoint from the inserted range
    rates = {}
    for eps in (0.1, 0.01, 0.001):
        bf = BloomFilter.plan(10**5, eps, hash_seed=3)
        bf.insert_many(keys)
        rates[eps] = float(bf.contains_many(probes).mean())
    elapsed = time.perf_counter() - t0
    ok = all(eps / 2 <= r <= 2 * eps for eps, r in rates.items()) and elapsed < 30
    criterion("C3 FPR calibration", ok,
              ", ".join(f"eps={e:g}: {r:.5f}" for e, r in rates.items()) + f" ({elapsed:.1f}s)")
    assert ok


def test_c04_merge_union(criterion):
    rng = np.random.default_rng(4)
    identical = 0
    for trial in range(100):
        n1, n2 = rng.integers(0, 2000, size=2)
        s1 = rng.integers(-2**62, 2**62, size=n1)
        s2 = rng.integers(-2**62, 2**62, size=n2)
        params = plan_parameters(int(max(1, n1 + n2)), float(rng.uniform(1e-4, 0.5)), trial)
        a, b, u = BloomFilter(params), BloomFilter(params), BloomFilter(params)
        a.insert_many(s1)
        b.insert_many(s2)
        u.insert_many(np.concatenate([s1, s2]))
        identical += np.array_equal(merge(a, b).bits, u.bits)
    criterion("C4 merge/union bit equality", identical == 100, f"{identical}/100 identical")
    assert identical == 100


def test_c05_sizing_ratios(criterion):
    worst = 0.0
    ok = True
    for n in (1, 10, 1000, 12345, 10**6):
        base = plan_parameters(n, 0.1).m_bits
        for eps, ratio in ((0.01, 2.0), (0.001, 3.0)):
            m = plan_parameters(n, eps).m_bits
            # one bit of rounding on each operand
            slack = 1 + ratio
            dev = abs(m - ratio * base)
            worst = max(worst, dev / slack)
            ok &= dev <= slack
    criterion("C5 sizing ratios", ok, f"worst deviation {worst:.2f} of the rounding allowance")
    assert ok


def _fp_fixture(seed):
    """Distinct keys on both sides drawn from 1..2e5: about 1e4 small keys, up to 1e5 big rows."""
    rng = np.random.default_rng(600 + seed)
    big, small = make_tables(rng, int(rng.integers(50_000, 100_001)), int(rng.integers(5_000, 10_001)),
                             200_000, 200_000, big_parts=int(rng.integers(1, 16)),
                             small_parts=int(rng.integers(1, 8)), unique_small=True, unique_big=True)
    eps = float(rng.choice([0.001, 0.002, 0.005, 0.01]))
    c1 = condition1(float(rng.uniform(0.3, 1.0)))
    c2 = condition2(float(rng.uniform(0.8, 1.0)))
    return big, small, eps, c1, c2


def false_positive_z(seed):
    big, small, eps, c1, c2 = _fp_fixture(seed)
    # exact count and no safety margin, so the filter is planned for exactly eps
    cfg = JoinConfig(epsilon=eps, safety_factor=1.0, condition1=c1, condition2=c2, seed=seed,
                     worker_threads=1)
    _, timings = bloom_cascade_join(big, small, cfg)
    n_filtrable, true_candidates = filtrable_count(big, small, c1, c2)
    fp = timings.filtered_kept - true_candidates
    return fp, (fp - eps * n_filtrable) / math.sqrt(n_filtrable * eps * (1 - eps))


def test_c06_false_positive_accounting(criterion):
    outcomes = [false_positive_z(seed) for seed in range(20)]
    worst = max(abs(z) for _, z in outcomes)
    ok = all(abs(z) <= 3 and fp >= 0 for fp, z in outcomes)
    criterion("C6 FP accounting", ok, f"20 fixtures, worst |z| = {worst:.2f}")
    assert ok


def test_c07_model_recovery(criterion):
    rng = np.random.default_rng(7)
    m = rng.uniform(1e7, 1e9, size=50)
    k1, k2 = 2e-9, 0.5
    exact = fit_bloom_model(list(zip(m, k1 * m + k2)))
    noisy = fit_bloom_model(list(zip(m, (k1 * m + k2) * (1 + 0.01 * rng.standard_normal(50)))))
    bloom_exact = abs(exact.k1 / k1 - 1) <= 1e-3 and abs(exact.k2 / k2 - 1) <= 1e-3
    bloom_noisy = abs(noisy.k1 / k1 - 1) <= 0.05 and abs(noisy.k2 / k2 - 1) <= 0.05

    truth = JoinTimeModel(10.0, 50.0, 3000.0, 200.0)
    eps = np.geomspace(0.001, 0.5, 20)
    clean = eval_join_model(truth, eps)
    fit_clean = fit_join_model(list(zip(eps, clean)))
    join_exact = np.max(np.abs(eval_join_model(fit_clean, eps) / clean - 1)) <= 1e-3
    obs = clean * (1 + 0.01 * rng.standard_normal(len(eps)))
    fit_noisy = fit_join_model(list(zip(eps, obs)))
    rms = float(np.sqrt(np.mean((eval_join_model(fit_noisy, eps) / clean - 1) ** 2)))
    ok = bloom_exact and bloom_noisy and join_exact and rms <= 0.02
    criterion("C7 model recovery", ok,
              f"K1 err {abs(noisy.k1 / k1 - 1):.3%}, K2 err {abs(noisy.k2 / k2 - 1):.3%}, "
              f"join RMS {rms:.3%}")
    assert ok


def test_c08_optimizer(criterion):
    rng = np.random.default_rng(8)
    grid = np.geomspace(EPS_MIN, 1.0, 1000)
    models = [(BloomTimeModelEps(0.0, 1.0), JoinTimeModel(0.0, 0.0, 10.0, 1.0))]
    models += list(random_models(rng, 100))
    worst = 0.0
    grid_ok = True
    for bloom, join in models:
        opt = solve_optimal_epsilon(bloom, join)
        oracle = bisection_optimum(bloom.c1, join.l2, join.a, join.b,
                                   lambda e: model_total(e, bloom, join))
        worst = max(worst, abs(opt.epsilon_star - oracle))
        grid_ok &= model_total(opt.epsilon_star, bloom, join) <= np.min(model_total(grid, bloom, join))
    ok = worst <= 1e-9 and grid_ok
    criterion("C8 optimizer", ok, f"101 models, max |newton - bisection| = {worst:.2e}, grid ok={grid_ok}")
    assert ok


def test_c09_derivative(criterion):
    rng = np.random.default_rng(9)
    grid = np.geomspace(EPS_MIN, 1.0, 40)
    worst = 0.0
    ok = True
    for bloom, join in random_models(rng, 100):
        for e in grid:
            fd = float(mp_central_difference(e, params_of(bloom, join)))
            d = total_derivative(e, bloom, join)
            # floor for roots where the terms cancel: float rounding of the summands
            scale = abs(join.a * math.log(join.a * e + join.b)) + join.a + join.l2 + bloom.c1 / e
            err = abs(d - fd)
            worst = max(worst, err / max(abs(fd), 1e-300))
            ok &= err <= 1e-6 * abs(fd) + 1e-12 * scale
    criterion("C9 derivative", ok, f"100 models x 40 eps, max relative error {worst:.2e}")
    assert ok


@pytest.fixture(scope="module")
def desk_sweeps():
    config = bench.SweepConfig(data=bench.default_fixture(scale_factor=0.01),
                               join=JoinConfig(worker_threads=1), repetitions=3)
    t0 = time.perf_counter()
    first = bench.run_sweep(config)
    elapsed = time.perf_counter() - t0
    second = bench.run_sweep(config)
    return first, second, elapsed


def test_c10_sweep_size_and_runtime(criterion, desk_sweeps):
    results, _, elapsed = desk_sweeps
    n_runs = sum(r.algorithm == "cascade" for r in results)
    ok = n_runs == 69 and elapsed < 600
    criterion("C10a sweep completes", ok, f"{n_runs} runs in {elapsed:.1f}s")
    assert ok


def test_c10_join_dominates(criterion, desk_sweeps):
    results, _, _ = desk_sweeps
    bloom = bench.median_by_epsilon(results, "t_bloom_build")
    join = bench.median_by_epsilon(results, "t_filter_join")
    ratio = min(join[e] / bloom[e] for e in bloom)
    ok = all(join[e] > bloom[e] for e in bloom)
    criterion("C10b filter+join > bloom build", ok, f"smallest median ratio {ratio:.2f}")
    assert ok


def test_c10_bloom_build_non_increasing(criterion, desk_sweeps):
    results, _, _ = desk_sweeps
    bloom = list(bench.median_by_epsilon(results, "t_bloom_build").items())
    rises = [(e1, e2, y2 / y1 - 1) for (e1, y1), (e2, y2) in zip(bloom, bloom[1:]) if y2 > y1]
    detail = (f"median {bloom[0][1]:.2f} -> {bloom[-1][1]:.2f} ms over 23 eps, "
              f"{len(rises)} adjacent rises (largest {max((r for *_, r in rises), default=0):.1%})")
    criterion("C10c bloom build non-increasing", not rises, detail)
    assert not rises, f"median t_bloom_build rises between adjacent eps: {rises}"


def _non_timing_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: v for k, v in row.items() if k not in bench.TIMING_COLUMNS} for row in rows]


def test_c11_determinism(criterion, desk_sweeps, tmp_path):
    first, second, _ = desk_sweeps
    bench.write_results(first, tmp_path / "a.csv")
    bench.write_results(second, tmp_path / "b.csv")
    a, b = _non_timing_rows(tmp_path / "a.csv"), _non_timing_rows(tmp_path / "b.csv")
    ok = a == b and len(a) == 69
    criterion("C11 determinism", ok, f"{len(a)} rows, identical outside timing columns: {a == b}")
    assert ok
