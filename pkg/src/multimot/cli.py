"""Command-line entry point: ``multimot {gen,sinkhorn,nemot,emgw,bench}``.

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 memory-budget
refusal, 4 numerical failure. Results are JSON run records on stdout (or
``--out``). Option precedence is flags, then ``--config``, then defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import bench, datagen, sinkhorn
from .core import PairwiseCost, build_cost_graph, circle_view
from .errors import BudgetExceededError, DatasetFormatError, InnerSolverError, NumericalError, TrainingError
from .neural import TrainConfig

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_BUDGET, EXIT_NUMERIC = 0, 1, 2, 3, 4

FAMILY_ALIASES = {
    "uniform": "uniform-cube",
    "uniform-cube": "uniform-cube",
    "gaussian": "isotropic-gaussian",
    "isotropic-gaussian": "isotropic-gaussian",
    "gmm": "gmm",
}

SINKHORN_DEFAULTS = {"graph": "full", "cost": "sqeuclidean", "eps": 0.1, "tol": 1e-6, "max_iter": 10_000, "max_tuples": None}
NEMOT_DEFAULTS = {
    "graph": "full",
    "cost": "sqeuclidean",
    "eps": 0.1,
    "loss": "aligned",
    **{key: val for key, val in TrainConfig().to_dict().items()},
}
EMGW_DEFAULTS = {
    "eps": 0.1,
    "edges": "circle",
    "outer_iters": 10,
    "step": 1.0 / 64.0,
    "inner": "sinkhorn",
    "sinkhorn_tol": 1e-9,
    "sinkhorn_max_iter": 10_000,
    **{key: val for key, val in TrainConfig().to_dict().items()},
}


class UsageError(Exception):
    pass


def _platform():
    return bench.platform_note()


def resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the ``--config`` file, overridden by explicit flags."""
    out = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = json.load(fh)
        cfg = cfg.get("config", cfg)  # a previous run record works as a config
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        out.update(cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def emit(record: dict, out_path=None) -> None:
    text = json.dumps(record, indent=2, default=_json_default)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def run_record(command, config, seed, values, wall, times=None, peak=None, **extra) -> dict:
    return {
        "command": command,
        "status": "ok",
        "config": config,
        "seed": seed,
        "values": values,
        "wall_time": wall,
        "times": times or [],
        "peak_tensor_entries": peak,
        "platform": _platform(),
        **extra,
    }


def _cost(kind):
    if kind not in ("sqeuclidean", "cosine"):
        raise UsageError(f"cost kind {kind!r} is not available from the command line")
    return PairwiseCost(kind)


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    family = FAMILY_ALIASES.get(args.family)
    if family is None:
        raise UsageError(f"unknown family {args.family!r}")
    try:
        spec = datagen.GenSpec(family, args.n, args.k, args.d, args.seed, sigma=args.sigma)
        data = datagen.generate(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    datagen.save_dataset(data, args.out)
    with open(os.path.join(args.out, datagen.MANIFEST)) as fh:
        manifest = json.load(fh)
    print(json.dumps({"path": args.out, **manifest}, indent=2))
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    cfg = resolve(SINKHORN_DEFAULTS, args)
    data = datagen.load_dataset(args.data)
    graph = build_cost_graph(cfg["graph"], data.k)
    t0 = time.perf_counter()
    pots, rep = sinkhorn.solve(data, graph, _cost(cfg["cost"]), cfg["eps"], cfg["tol"], cfg["max_iter"], cfg["max_tuples"])
    wall = time.perf_counter() - t0
    circ = circle_view(graph) is not None
    record = run_record(
        "sinkhorn",
        cfg,
        None,
        {"value": rep.value, "iterations": rep.iterations, "marginal_violation": rep.marginal_violation, "converged": rep.converged},
        wall,
        peak=(2 * data.n * data.n) if circ else float(data.n) ** data.k,
        solver="circle" if circ else "dense",
    )
    emit(record, args.out)
    return EXIT_OK


def _train_config(cfg) -> TrainConfig:
    keys = TrainConfig().to_dict().keys()
    return TrainConfig(**{key: cfg[key] for key in keys})


def cmd_nemot(args) -> int:
    from . import nemot

    cfg = resolve(NEMOT_DEFAULTS, args)
    data = datagen.load_dataset(args.data)
    graph = build_cost_graph(cfg["graph"], data.k)
    tcfg = _train_config(cfg)
    t0 = time.perf_counter()
    model = nemot.init_model(data, graph, cfg["eps"], _cost(cfg["cost"]), tcfg)
    est = nemot.train_nemot(data, model, loss=cfg["loss"])
    wall = time.perf_counter() - t0
    extra = {}
    if args.checkpoint:
        nemot.save_model(model, args.checkpoint, data)
        extra["checkpoint"] = args.checkpoint
    if args.plan_out:
        np.save(args.plan_out, nemot.neural_plan_tensor(model, data))
        extra["plan_out"] = args.plan_out
    if args.pairwise_plan:
        u, v = sorted(args.pairwise_plan)
        L = nemot.build_L_matrices(model, data)
        path = args.pairwise_out or f"pairwise_{u}_{v}.csv"
        np.savetxt(path, nemot.pairwise_plan_marginal_circle(L, u, v, normalize=True), delimiter=",", fmt="%.17g")
        extra["pairwise_out"] = path
    record = run_record(
        "nemot",
        cfg,
        tcfg.seed,
        {"value": est.value, "cap_events": est.cap_events},
        wall,
        times=est.epoch_times,
        peak=tcfg.batch_size ** data.k if cfg["loss"] == "ustat" else tcfg.batch_size,
        **extra,
    )
    emit(record, args.out)
    return EXIT_OK


def cmd_emgw(args) -> int:
    from . import emgw

    cfg = resolve(EMGW_DEFAULTS, args)
    data = datagen.load_dataset(args.data)
    config = emgw.EmgwConfig(
        epsilon=cfg["eps"],
        edges=cfg["edges"],
        outer_iters=cfg["outer_iters"],
        step=cfg["step"],
        inner=cfg["inner"],
        sinkhorn_tol=cfg["sinkhorn_tol"],
        sinkhorn_max_iter=cfg["sinkhorn_max_iter"],
        nemot=_train_config(cfg),
    )
    t0 = time.perf_counter()
    res = emgw.nemgw_alternating(data, config)
    wall = time.perf_counter() - t0
    record = run_record(
        "emgw",
        cfg,
        cfg["seed"],
        {"value": res.value, "s1": res.s1, "penalty": res.penalty, "inner": res.inner_value},
        wall,
        times=res.trace,
        a_norms=res.a_norms(),
    )
    emit(record, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    grid = bench.load_grid(args.grid)

    def progress(cell):
        print(f"[bench] {cell['solver']} n={cell['n']} k={cell['k']} d={cell['d']}: {cell['status']}", file=sys.stderr)

    report = bench.run_grid(grid, repeats=args.repeats, log=progress)
    prefix = args.out or "bench"
    with open(prefix + ".json", "w") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
    bench.write_csv(report, prefix + ".csv")
    print(json.dumps({"report": prefix + ".json", "csv": prefix + ".csv", "cells": len(report["cells"]), "slopes": report["slopes"]}, indent=2))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _training_flags(p):
    g = p.add_argument_group("training (defaults: lr 5e-5, batch 64, 50 epochs)")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--clip", dest="clip_norm", type=float)
    g.add_argument("--decay-every", type=int)
    g.add_argument("--decay-factor", type=float)
    g.add_argument("--hidden", type=int, nargs="+", help="hidden layer widths")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multimot", description="Entropic multimarginal OT: Sinkhorn, NEMOT and NEMGW.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset directory")
    g.add_argument("--family", required=True, help="uniform | gaussian | gmm")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma", type=float, default=0.1, help="gmm component std")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sinkhorn", help="multimarginal Sinkhorn")
    s.add_argument("--data", required=True)
    s.add_argument("--graph", choices=["full", "circle", "tree"])
    s.add_argument("--cost", choices=["sqeuclidean", "cosine"])
    s.add_argument("--eps", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--max-tuples", type=float, help="dense-tensor budget (also MULTIMOT_MAX_TUPLES)")
    s.add_argument("--allow-skip", action="store_true", help="exit 0 with a skip record when over budget")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sinkhorn)

    n = sub.add_parser("nemot", help="neural estimator")
    n.add_argument("--data", required=True)
    n.add_argument("--graph", choices=["full", "circle", "tree"])
    n.add_argument("--cost", choices=["sqeuclidean", "cosine"])
    n.add_argument("--eps", type=float)
    n.add_argument("--loss", choices=["aligned", "ustat"])
    _training_flags(n)
    n.add_argument("--checkpoint")
    n.add_argument("--plan-out", help="write the dense neural plan (.npy)")
    n.add_argument("--pairwise-plan", type=int, nargs=2, metavar=("I", "J"))
    n.add_argument("--pairwise-out")
    n.add_argument("--allow-skip", action="store_true")
    n.add_argument("--config")
    n.add_argument("--out")
    n.set_defaults(func=cmd_nemot)

    e = sub.add_parser("emgw", help="alternating EMGW solver")
    e.add_argument("--data", required=True)
    e.add_argument("--eps", type=float)
    e.add_argument("--edges", choices=["circle", "full", "path"])
    e.add_argument("--outer-iters", type=int)
    e.add_argument("--step", type=float)
    e.add_argument("--inner", choices=["sinkhorn", "nemot"])
    e.add_argument("--sinkhorn-tol", type=float)
    e.add_argument("--sinkhorn-max-iter", type=int)
    _training_flags(e)
    e.add_argument("--allow-skip", action="store_true")
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_emgw)

    b = sub.add_parser("bench", help="runtime-scaling grid")
    b.add_argument("grid", help="JSON grid file")
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", help="output prefix for .json and .csv (default: bench)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            return args.func(args)
        except InnerSolverError as exc:
            if isinstance(exc.__cause__, (BudgetExceededError, NumericalError, TrainingError)):
                raise exc.__cause__ from exc
            raise
    except UsageError as exc:
        print(f"multimot {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetExceededError as exc:
        if getattr(args, "allow_skip", False):
            emit({"command": args.command, "status": "skipped", "reason": f"memory budget: {exc}", "platform": _platform()}, getattr(args, "out", None))
            return EXIT_OK
        print(f"multimot {args.command}: skipped: memory budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (NumericalError, TrainingError) as exc:
        print(f"multimot {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, OSError) as exc:
        print(f"multimot {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"multimot {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InnerSolverError as exc:
        print(f"multimot {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
