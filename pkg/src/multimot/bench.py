"""Runtime-scaling benchmark grid.

A grid file is a JSON object. List-valued keys among ``AXES`` are crossed;
everything else is a setting shared by every cell::

    {"solver": ["nemot", "sinkhorn"], "n": [50, 100], "k": [4], "d": [2],
     "b": [64], "graph": ["full"], "family": "uniform-cube", "eps": 0.1,
     "epochs": 5, "sinkhorn_sweeps": 1, "timeout": 600}

Every cell ends as ``ok``, ``skipped`` (memory budget) or ``failed``
(timeout or error, with the reason). Sinkhorn cells time a fixed number of
sweeps so that timings measure per-sweep cost, not convergence speed.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import platform
import signal
import time
from contextlib import contextmanager

import numpy as np

from . import datagen, sinkhorn
from .core import PairwiseCost, build_cost_graph
from .errors import BudgetExceededError
from .neural import TrainConfig

AXES = ("solver", "n", "k", "d", "b", "graph")
DEFAULTS = {
    "solver": ["nemot"],
    "n": [],
    "k": [3],
    "d": [1],
    "b": [64],
    "graph": ["full"],
    "family": "uniform-cube",
    "eps": 0.1,
    "epochs": 50,
    "loss": "aligned",
    "sinkhorn_sweeps": 1,
    "max_tuples": None,
    "timeout": None,
    "seed": 0,
}
CSV_COLUMNS = (
    "solver", "n", "k", "d", "b", "graph", "status", "repeats",
    "time_median", "time_min", "time_max", "value", "reason",
)


class CellTimeout(Exception):
    pass


@contextmanager
def time_limit(seconds):
    """SIGALRM-based limit; a no-op without a limit or off the main thread."""
    if not seconds or not hasattr(signal, "setitimer"):
        yield
        return

    def handler(signum, frame):
        raise CellTimeout(f"cell exceeded {seconds}s")

    try:
        old = signal.signal(signal.SIGALRM, handler)
    except ValueError:
        yield
        return
    signal.setitimer(signal.ITIMER_REAL, seconds)
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        signal.signal(signal.SIGALRM, old)


def load_grid(path) -> dict:
    with open(path) as fh:
        grid = json.load(fh)
    if not isinstance(grid, dict):
        raise ValueError("grid file must hold a JSON object")
    unknown = set(grid) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    return grid


def expand(grid: dict) -> tuple[list, dict]:
    """Return ``(cells, settings)``; each cell maps every axis to one value."""
    merged = {**DEFAULTS, **grid}
    axes = {a: merged[a] if isinstance(merged[a], list) else [merged[a]] for a in AXES}
    settings = {key: merged[key] for key in DEFAULTS if key not in AXES}
    cells = [dict(zip(AXES, combo)) for combo in itertools.product(*(axes[a] for a in AXES))]
    return cells, settings


def _dataset(cell, settings, repeat):
    family = settings["family"]
    d = cell["d"]
    if family == "gmm" and d % 2:
        d += 1
    spec = datagen.GenSpec(family, cell["n"], cell["k"], d, seed=settings["seed"] + repeat)
    return datagen.generate(spec)


def run_cell(cell: dict, settings: dict, repeat: int = 0) -> dict:
    """One timed run; raises on budget refusal or failure."""
    data = _dataset(cell, settings, repeat)
    graph = build_cost_graph(cell["graph"], cell["k"])
    eps = settings["eps"]
    t0 = time.perf_counter()
    if cell["solver"] == "sinkhorn":
        sweeps = settings["sinkhorn_sweeps"]
        _, rep = sinkhorn.solve(data, graph, PairwiseCost(), eps, tol=0.0, max_iter=sweeps, max_tuples=settings["max_tuples"])
        value, extra = rep.value, {"sweeps": rep.iterations, "marginal_violation": rep.marginal_violation}
    elif cell["solver"] == "nemot":
        from . import nemot

        cfg = TrainConfig(batch_size=min(cell["b"], cell["n"]), epochs=settings["epochs"], seed=settings["seed"] + repeat)
        model = nemot.init_model(data, graph, eps, PairwiseCost(), cfg)
        est = nemot.train_nemot(data, model, loss=settings["loss"])
        value, extra = est.value, {"epoch_times": est.epoch_times}
    else:
        raise ValueError(f"unknown solver {cell['solver']!r}")
    return {"time": time.perf_counter() - t0, "value": value, **extra}


def loglog_slope(ns, ts) -> float | None:
    if len(ns) < 2:
        return None
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def fit_slopes(cells: list) -> list:
    """Slope of log(median time) vs log(n) per group of the other axes."""
    groups = {}
    for c in cells:
        if c["status"] != "ok":
            continue
        key = tuple((a, c[a]) for a in AXES if a != "n")
        groups.setdefault(key, []).append((c["n"], c["time_median"]))
    out = []
    for key, pts in groups.items():
        pts.sort()
        slope = loglog_slope([p[0] for p in pts], [p[1] for p in pts])
        if slope is not None:
            out.append({**dict(key), "n": [p[0] for p in pts], "slope": slope})
    return out


def run_grid(grid: dict, repeats: int = 1, log=None) -> dict:
    cells, settings = expand(grid)
    results = []
    for cell in cells:
        entry = {**cell, "status": "ok", "reason": None, "runs": []}
        for r in range(repeats):
            try:
                with time_limit(settings["timeout"]):
                    entry["runs"].append(run_cell(cell, settings, r))
            except BudgetExceededError as exc:
                entry.update(status="skipped", reason=f"memory budget: {exc}")
                break
            except CellTimeout as exc:
                entry.update(status="failed", reason=f"timeout: {exc}")
                break
            except Exception as exc:  # a failed cell must not stop the grid
                entry.update(status="failed", reason=f"{type(exc).__name__}: {exc}")
                break
        times = [run["time"] for run in entry["runs"]]
        if entry["status"] == "ok":
            entry.update(
                time_median=float(np.median(times)),
                time_min=min(times),
                time_max=max(times),
                value=float(np.median([run["value"] for run in entry["runs"]])),
            )
        if log:
            log(entry)
        results.append(entry)
    return {
        "axes": {a: sorted({c[a] for c in cells}, key=str) for a in AXES} if cells else {a: [] for a in AXES},
        "settings": settings,
        "repeats": repeats,
        "cells": results,
        "slopes": fit_slopes(results),
        "platform": platform_note(),
    }


def platform_note() -> str:
    return f"{platform.python_implementation()} {platform.python_version()} / numpy {np.__version__} / {platform.machine()}"


def write_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for c in report["cells"]:
            row = {col: c.get(col) for col in CSV_COLUMNS}
            row["repeats"] = len(c["runs"])
            for col in ("time_median", "time_min", "time_max", "value"):
                if row[col] is not None and not math.isfinite(row[col]):
                    row[col] = None
            w.writerow(row)
