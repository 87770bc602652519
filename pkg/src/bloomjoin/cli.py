"""``bloomjoin`` command line: gen, run, sweep, fit, optimize, report.

Machine-readable output goes to stdout, diagnostics to stderr.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import bench, costmodel
from .data import (DEFAULT_PARTITION_BYTES, LINEITEM, ORDERS, ByBytes, GenConfig, condition1,
                   condition2, generate, load_csv, write_csv)
from .engine import ALGORITHMS, DEFAULT_SHUFFLE_PARTITIONS, JoinConfig, run_join
from .errors import BloomJoinError

log = logging.getLogger("bloomjoin")


def _epsilon(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"epsilon must be in (0, 1], got {text}")
    return value


def _epsilon_list(text: str) -> tuple[float, ...]:
    values = tuple(_epsilon(t) for t in text.split(",") if t.strip())
    if not values:
        raise argparse.ArgumentTypeError("empty epsilon list")
    return values


def _selectivity(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"selectivity must be in (0, 1], got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("BLOOMJOIN_THREADS")
    if env:
        try:
            return _positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise BloomJoinError(f"BLOOMJOIN_THREADS: {exc}") from None
    return os.cpu_count() or 1


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=False, default=str)
    sys.stdout.write("\n")


def cmd_gen(args) -> int:
    config = GenConfig(scale_factor=args.scale, seed=args.seed, partition_bytes=args.partition_bytes)
    orders, lineitem = generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(orders, out / "orders.csv")
    write_csv(lineitem, out / "lineitem.csv")
    _emit({"orders": str(out / "orders.csv"), "orders_rows": orders.num_rows,
           "lineitem": str(out / "lineitem.csv"), "lineitem_rows": lineitem.num_rows})
    return 0


def _join_config(args, epsilon: float) -> JoinConfig:
    return JoinConfig(epsilon=epsilon, shuffle_partitions=args.partitions,
                      count_budget=args.count_budget, worker_threads=_threads(args),
                      safety_factor=args.safety_factor, seed=args.seed,
                      condition1=condition1(args.sel_big), condition2=condition2(args.sel_small),
                      broadcast_max_rows=args.broadcast_max_rows)


def cmd_run(args) -> int:
    policy = ByBytes(args.partition_bytes)
    big = load_csv(args.big, LINEITEM, policy)
    small = load_csv(args.small, ORDERS, policy)
    config = _join_config(args, args.epsilon)
    result, timings = run_join(args.algorithm, big, small, config)
    if args.result:
        write_csv(result, args.result)
    doc = {"algorithm": args.algorithm, "epsilon": args.epsilon, "partitions": args.partitions,
           "threads": config.worker_threads, "seed": args.seed}
    doc.update(timings.to_dict())
    _emit(doc)
    return 0


def cmd_sweep(args) -> int:
    data = GenConfig(scale_factor=args.scale, seed=args.seed, sel_big=args.sel_big,
                     sel_small=args.sel_small, partition_bytes=args.partition_bytes)
    config = bench.SweepConfig(
        epsilons=args.epsilons, repetitions=args.reps, data=data,
        join=_join_config(args, 1.0),
        include_shuffle_baseline="shuffle" in args.baselines,
        include_broadcast_baseline="broadcast" in args.baselines,
    )
    results = bench.run_sweep(config)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_results(results, out / "results.csv")
    _emit({"results": str(out / "results.csv"), "rows": len(results)})
    return 0


def cmd_fit(args) -> int:
    results = bench.load_results(args.results)
    fit = bench.fit_and_optimize(results, tol=args.tol)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = fit.to_json()
    (out / "model.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    _emit(doc)
    return 0


def cmd_optimize(args) -> int:
    _, bloom_eps, join = costmodel.models_from_json(args.model)
    opt = costmodel.solve_optimal_epsilon(bloom_eps, join, tol=args.tol, eps_min=args.eps_min)
    if opt.warning:
        log.warning("%s", opt.warning)
    _emit({"epsilon_star": opt.epsilon_star, "method": opt.method, "residual": opt.residual,
           "iterations": opt.iterations,
           "model_total": costmodel.model_total(opt.epsilon_star, bloom_eps, join)})
    return 0


def cmd_report(args) -> int:
    results = bench.load_results(args.results)
    fit = bench.fit_and_optimize(results, tol=args.tol)
    files = bench.emit_report(results, fit, args.output_dir)
    _emit({k: str(v) for k, v in files.items()} | {"epsilon_star": fit.optimum.epsilon_star,
                                                      "method": fit.optimum.method})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="64-bit seed (default 42)")
    common.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS,
                        help="worker threads (default: $BLOOMJOIN_THREADS or CPU count)")
    common.add_argument("--output-dir", default=argparse.SUPPRESS, help="where files are written (default .)")

    parser = argparse.ArgumentParser(prog="bloomjoin", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--threads", type=_positive_int, default=None)
    parser.add_argument("--output-dir", default=".")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def join_flags(p):
        p.add_argument("--partitions", type=_positive_int, default=DEFAULT_SHUFFLE_PARTITIONS,
                       help="shuffle partitions (default 200)")
        p.add_argument("--sel-big", type=_selectivity, default=1.0, help="condition1 selectivity")
        p.add_argument("--sel-small", type=_selectivity, default=1.0, help="condition2 selectivity")
        p.add_argument("--safety-factor", type=float, default=1.2)
        p.add_argument("--count-budget", type=_positive_float, default=math.inf,
                       help="seconds spent approximating the small-table count (default: exact)")
        p.add_argument("--broadcast-max-rows", type=_positive_int, default=1_000_000)

    p = sub.add_parser("gen", parents=[common], help="generate orders.csv and lineitem.csv")
    p.add_argument("--scale", type=_positive_float, default=0.01)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--partition-bytes", type=_positive_int, default=DEFAULT_PARTITION_BYTES)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", parents=[common], help="one join run; timings JSON on stdout")
    p.add_argument("--big", required=True, help="lineitem CSV")
    p.add_argument("--small", required=True, help="orders CSV")
    p.add_argument("--epsilon", type=_epsilon, default=0.01)
    p.add_argument("--algorithm", choices=sorted(ALGORITHMS), default="cascade")
    p.add_argument("--partition-bytes", type=_positive_int, default=DEFAULT_PARTITION_BYTES,
                   help="input partition size when loading CSV")
    p.add_argument("--result", help="optional CSV path for the join result")
    join_flags(p)
    p.set_defaults(func=cmd_run)

    defaults = bench.default_fixture()
    p = sub.add_parser("sweep", parents=[common], help="epsilon sweep; writes results.csv")
    p.add_argument("--scale", type=_positive_float, default=defaults.scale_factor)
    p.add_argument("--epsilons", type=_epsilon_list, default=bench.DEFAULT_EPSILONS,
                   help="comma-separated list (default: 23 log-spaced points in [1e-4, 0.5])")
    p.add_argument("--reps", type=_positive_int, default=3)
    p.add_argument("--partition-bytes", type=_positive_int, default=defaults.partition_bytes)
    p.add_argument("--baselines", type=lambda s: set(filter(None, s.split(","))), default=set(),
                   help="comma-separated subset of shuffle,broadcast")
    join_flags(p)
    p.set_defaults(func=cmd_sweep, sel_small=defaults.sel_small, sel_big=defaults.sel_big)

    for name, func, helptext in (("fit", cmd_fit, "fit models from results.csv; writes model.json"),
                                 ("report", cmd_report, "fit and write results/model/plotdata")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--results", required=True)
        p.add_argument("--tol", type=_positive_float, default=1e-12)
        p.set_defaults(func=func)

    p = sub.add_parser("optimize", parents=[common], help="solve for the optimal epsilon from model.json")
    p.add_argument("--model", required=True)
    p.add_argument("--tol", type=_positive_float, default=1e-12)
    p.add_argument("--eps-min", type=_positive_float, default=costmodel.EPS_MIN)
    p.set_defaults(func=cmd_optimize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep" and args.baselines - {"shuffle", "broadcast"}:
        parser.error(f"unknown baselines {sorted(args.baselines - {'shuffle', 'broadcast'})}")
    try:
        return args.func(args)
    except (BloomJoinError, OSError, ValueError) as exc:
        print(f"bloomjoin {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
