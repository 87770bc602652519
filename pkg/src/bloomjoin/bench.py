"""Error-rate sweeps over the cascade join, model fitting and report files.

A sweep generates its data once, runs one discarded warm-up, then runs each
``(repetition, epsilon)`` pair as an isolated engine run.  Everything in an
:class:`ExperimentResult` except the ``t_*`` timing columns is a pure
function of the configuration.
"""

from __future__ import annotations

import csv
import dataclasses
import gc
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import costmodel as cm
from .data import GenConfig, generate
from .engine import (JoinConfig, baseline_broadcast_hash_join, baseline_shuffle_join,
                     bloom_cascade_join, filtrable_count)
from .errors import BloomJoinError, InvalidArgumentError, UnderdeterminedError

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_EPSILONS",
    "TIMING_COLUMNS",
    "SweepConfig",
    "ExperimentResult",
    "SweepRunError",
    "FitResult",
    "default_fixture",
    "run_sweep",
    "fit_and_optimize",
    "emit_report",
    "write_results",
    "load_results",
    "load_plotdata",
    "median_by_epsilon",
]

DEFAULT_EPSILONS: tuple[float, ...] = tuple(float(x) for x in np.geomspace(1e-4, 0.5, 23))
TIMING_COLUMNS = ("t_count", "t_bloom_build", "t_broadcast", "t_filter_join")
PLOT_GRID_POINTS = 200


def default_fixture(scale_factor: float = 0.01, seed: int = 42) -> GenConfig:
    """Desk-scale Orders/Lineitem: 20% of orders pass condition2, so 80% of
    lineitem is filterable; 4 KiB parts give roughly 75 Orders partitions."""
    return GenConfig(scale_factor=scale_factor, seed=seed, sel_big=1.0, sel_small=0.2,
                     partition_bytes=4096)


@dataclass(frozen=True)
class SweepConfig:
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    repetitions: int = 3
    data: GenConfig = field(default_factory=default_fixture)
    join: JoinConfig = field(default_factory=JoinConfig)
    include_shuffle_baseline: bool = False
    include_broadcast_baseline: bool = False
    warmup: bool = True
    oracle_max_rows: int = 10_000_000

    def __post_init__(self):
        if not self.epsilons:
            raise InvalidArgumentError("epsilon list is empty")
        for e in self.epsilons:
            if not 0.0 < e <= 1.0:
                raise InvalidArgumentError(f"epsilon must be in (0, 1], got {e!r}")
        if self.repetitions < 1:
            raise InvalidArgumentError("repetitions must be >= 1")


@dataclass
class ExperimentResult:
    algorithm: str
    epsilon: float | None
    run_index: int
    seed: int
    t_count: float
    t_bloom_build: float
    t_broadcast: float
    t_filter_join: float
    bytes_broadcast: int
    filtered_kept: int
    filtered_dropped: int
    result_rows: int
    count_estimate: int
    n_expected: int
    m_bits: int
    k_hashes: int
    filter_bytes: int
    shuffle_partitions: int
    n_filtrable: int | None
    true_candidates: int | None

    @property
    def false_positives(self) -> int | None:
        if self.true_candidates is None:
            return None
        return self.filtered_kept - self.true_candidates


_FIELDS = [f.name for f in dataclasses.fields(ExperimentResult)]
_FLOATS = {"epsilon", *TIMING_COLUMNS}
_OPTIONAL = {"epsilon", "n_filtrable", "true_candidates"}


class SweepRunError(BloomJoinError):
    def __init__(self, epsilon, repetition, cause):
        super().__init__(f"run failed at epsilon={epsilon}, repetition={repetition}: {cause}")
        self.epsilon = epsilon
        self.repetition = repetition


def _record(algorithm, epsilon, run_index, seed, timings, n_filtrable, true_candidates):
    t = timings.to_dict()
    return ExperimentResult(algorithm=algorithm, epsilon=epsilon, run_index=run_index, seed=seed,
                            n_filtrable=n_filtrable, true_candidates=true_candidates,
                            **{k: t[k] for k in _FIELDS if k in t})


def _timed(fn, *args):
    """Run one engine call with the collector paused, like ``timeit`` does."""
    gc.collect()
    enabled = gc.isenabled()
    gc.disable()
    try:
        return fn(*args)
    finally:
        if enabled:
            gc.enable()


def run_sweep(config: SweepConfig) -> list[ExperimentResult]:
    """Run every ``(repetition, epsilon)`` pair; baselines once per repetition."""
    orders, lineitem = generate(config.data)
    template = dataclasses.replace(config.join, condition1=config.data.condition1(),
                                   condition2=config.data.condition2())
    n_filtrable = true_candidates = None
    if lineitem.num_rows <= config.oracle_max_rows:
        n_filtrable, true_candidates = filtrable_count(lineitem, orders, template.condition1,
                                                       template.condition2)
    if config.warmup:
        warm = dataclasses.replace(template, epsilon=config.epsilons[0])
        _timed(bloom_cascade_join, lineitem, orders, warm)

    results = []
    for rep in range(config.repetitions):
        for eps in config.epsilons:
            cfg = dataclasses.replace(template, epsilon=eps)
            try:
                _, timings = _timed(bloom_cascade_join, lineitem, orders, cfg)
            except Exception as exc:
                raise SweepRunError(eps, rep, exc) from exc
            results.append(_record("cascade", eps, rep, cfg.seed, timings,
                                   n_filtrable, true_candidates))
            log.debug("rep=%d eps=%.3g timings=%s", rep, eps, timings)
        baselines = []
        if config.include_shuffle_baseline:
            baselines.append(("shuffle", baseline_shuffle_join))
        if config.include_broadcast_baseline:
            baselines.append(("broadcast", baseline_broadcast_hash_join))
        for name, fn in baselines:
            try:
                _, timings = _timed(fn, lineitem, orders, template)
            except Exception as exc:
                raise SweepRunError(None, rep, exc) from exc
            results.append(_record(name, None, rep, template.seed, timings,
                                   n_filtrable, true_candidates))
    return results


def median_by_epsilon(results: Sequence[ExperimentResult], column: str) -> dict[float, float]:
    """Median of ``column`` over repetitions, per epsilon (cascade runs only)."""
    groups: dict[float, list[float]] = {}
    for r in results:
        if r.algorithm == "cascade" and r.epsilon is not None:
            groups.setdefault(r.epsilon, []).append(getattr(r, column))
    return {e: statistics.median(v) for e, v in sorted(groups.items())}


# -- fitting -------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    bloom_size: cm.BloomTimeModel
    bloom_eps: cm.BloomTimeModelEps
    join: cm.JoinTimeModel
    optimum: cm.OptimalEpsilon
    n_expected: float

    def to_json(self) -> dict:
        return cm.models_to_json(self.bloom_size, self.bloom_eps, self.join, self.optimum,
                                 self.n_expected)


def fit_and_optimize(results: Sequence[ExperimentResult], tol: float = 1e-12) -> FitResult:
    """Fit both time models from cascade runs and solve for the optimal error rate.

    Times in results are milliseconds; models are fitted in seconds.
    """
    runs = [r for r in results
            if r.algorithm == "cascade" and r.epsilon is not None and r.epsilon < 1.0]
    eps_levels = sorted({r.epsilon for r in runs})
    sizes = sorted({r.m_bits for r in runs})
    problems = []
    if len(eps_levels) < 4:
        problems.append(f"join model needs >= 4 distinct epsilon levels, have {len(eps_levels)} "
                        f"({', '.join(f'{e:g}' for e in eps_levels) or 'none'})")
    if len(sizes) < 2:
        problems.append(f"bloom model needs >= 2 distinct filter sizes, have {len(sizes)}")
    if problems:
        raise UnderdeterminedError("; ".join(problems))

    bloom_size = cm.fit_bloom_model([(r.m_bits, r.t_bloom_build / 1e3) for r in runs])
    join = cm.fit_join_model([(r.epsilon, r.t_filter_join / 1e3) for r in runs])
    n_expected = float(statistics.median(r.n_expected for r in runs))
    bloom_eps = cm.to_eps_space(bloom_size, n_expected)
    optimum = cm.solve_optimal_epsilon(bloom_eps, join, tol=tol)
    if optimum.warning:
        log.warning("optimal epsilon: %s", optimum.warning)
    return FitResult(bloom_size, bloom_eps, join, optimum, n_expected)


# -- reports -------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results(results: Sequence[ExperimentResult], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIELDS)
        for r in results:
            w.writerow([_fmt(getattr(r, f)) for f in _FIELDS])


def load_results(path: str | Path) -> list[ExperimentResult]:
    out = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise InvalidArgumentError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            values = {}
            for f in _FIELDS:
                raw = row[f]
                if raw == "" and f in _OPTIONAL:
                    values[f] = None
                elif f == "algorithm":
                    values[f] = raw
                elif f in _FLOATS:
                    values[f] = float(raw)
                else:
                    values[f] = int(raw)
            out.append(ExperimentResult(**values))
    return out


def _plot_rows(results: Sequence[ExperimentResult], fit: FitResult) -> list[dict]:
    obs = [r for r in results
           if r.algorithm == "cascade" and r.epsilon is not None and r.epsilon < 1.0]
    lo = min([r.epsilon for r in obs] + [fit.optimum.epsilon_star])
    hi = min(1.0, max([r.epsilon for r in obs] + [fit.optimum.epsilon_star]))
    if hi <= lo:
        hi = min(1.0, lo * 10)
    grid = np.geomspace(lo, hi, PLOT_GRID_POINTS)
    bloom_curve = cm.eval_bloom_model(fit.bloom_eps, grid)
    join_curve = cm.eval_join_model(fit.join, grid)
    rows = [{"kind": "model", "epsilon": float(e), "bloom_seconds": float(b),
             "join_seconds": float(j), "total_seconds": float(b + j)}
            for e, b, j in zip(grid, bloom_curve, join_curve)]
    for r in obs:
        b, j = r.t_bloom_build / 1e3, r.t_filter_join / 1e3
        rows.append({"kind": "observed", "epsilon": r.epsilon, "bloom_seconds": b,
                     "join_seconds": j, "total_seconds": b + j})
    return rows


def emit_report(results: Sequence[ExperimentResult], fit: FitResult, path: str | Path) -> dict[str, Path]:
    """Write ``results.csv``, ``model.json`` and ``plotdata.csv`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {"results": out / "results.csv", "model": out / "model.json",
             "plotdata": out / "plotdata.csv"}
    write_results(results, files["results"])
    files["model"].write_text(json.dumps(fit.to_json(), indent=2) + "\n", encoding="utf-8")
    with files["plotdata"].open("w", encoding="utf-8", newline="") as fh:
        cols = ["kind", "epsilon", "bloom_seconds", "join_seconds", "total_seconds"]
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for row in _plot_rows(results, fit):
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return files


def load_plotdata(path: str | Path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return [{k: (v if k == "kind" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
