"""Neural estimation of entropic multimarginal OT.

One MLP potential ``f_j`` per marginal is trained by mini-batch gradient
ascent on the empirical dual

    (1/b) sum_r sum_j f_j(X_rj) - (eps/b) sum_r exp((sum_j f_j(X_rj) - c(X_r)) / eps) + eps

over aligned tuples ``X_r = (X_r0, ..., X_r{k-1})``. The trained potentials
give the estimate (the same objective on the full dataset) and a plan
density with respect to the product of the marginals.

For small batches the exponential term can be replaced by its U-statistic
over all ``b^k`` cross tuples; for circle cost graphs this is a matrix-product
trace (see :mod:`multimot.circle`).
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import circle
from .core import (
    CostGraph,
    CostMatrixSet,
    MarginalDataset,
    PairwiseCost,
    aligned_tuple_costs,
    circle_view,
    cost_tensor,
    pairwise_cost_matrices,
    point_tuple_costs,
)
from .errors import BudgetExceededError, NumericalError, TrainingError
from .neural import (
    AdamState,
    Mlp,
    TrainConfig,
    adam_step,
    flatten_grads,
    flatten_params,
    hidden_sizes,
    init_mlp,
    load_checkpoint,
    lr_at_epoch,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)
from .sinkhorn import circle_cost_log_mats, circle_log_scaling

log = logging.getLogger(__name__)

EXPONENT_CAP = 80.0
# exponents past this are float overflow territory, not a recoverable state
EXPONENT_LIMIT = 700.0
DEFAULT_ENUM_BUDGET = 1e7


@dataclass
class NemotModel:
    nets: list
    epsilon: float
    graph: CostGraph
    cost: PairwiseCost = field(default_factory=PairwiseCost)
    config: TrainConfig = field(default_factory=TrainConfig)
    cap_events: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if len(self.nets) != self.graph.k:
            raise ValueError(f"{len(self.nets)} networks for k={self.graph.k}")

    @property
    def k(self):
        return self.graph.k

    def potentials(self, data: MarginalDataset, rows=None) -> list:
        """``f_j`` evaluated on (rows of) every marginal."""
        out = []
        for j, net in enumerate(self.nets):
            x = data[j] if rows is None else data[j][rows]
            out.append(mlp_forward(net, x)[0])
        return out


def init_model(data: MarginalDataset, graph: CostGraph, epsilon: float, cost=None, config=None) -> NemotModel:
    config = config or TrainConfig()
    cost = cost or PairwiseCost()
    if data.k != graph.k:
        raise ValueError(f"dataset has k={data.k}, graph has k={graph.k}")
    streams = np.random.default_rng(config.seed).spawn(data.k)
    nets = []
    for d, rng in zip(data.dims, streams):
        hidden = config.hidden if config.hidden is not None else hidden_sizes(d)
        nets.append(init_mlp([d] + list(hidden) + [1], rng))
    return NemotModel(nets, epsilon, graph, cost, config)


def _guard(z, model):
    top = float(np.max(z)) if z.size else 0.0
    if not np.isfinite(top) or not np.all(np.isfinite(z)):
        raise NumericalError("non-finite exponent in dual objective", top)
    if top > EXPONENT_LIMIT:
        raise NumericalError("exponent beyond overflow guard", top)
    if top > EXPONENT_CAP:
        model.cap_events += 1
        log.warning("dual exponent %.1f capped at %.0f", top, EXPONENT_CAP)
        return np.minimum(z, EXPONENT_CAP)
    return z


def _rows2d(rows, k):
    rows = np.asarray(rows)
    return np.repeat(rows[:, None], k, axis=1) if rows.ndim == 1 else rows


def nemot_batch_objective(model: NemotModel, data: MarginalDataset, rows, with_grads=True):
    """Aligned-tuple dual objective on ``rows``; returns ``(value, grads)``.

    ``grads[j]`` lists the gradients of the objective (ascent direction) for
    network ``j`` in ``Mlp.params()`` order; ``None`` when ``with_grads`` is off.
    """
    r2 = _rows2d(rows, model.k)
    b = r2.shape[0]
    fs, caches = [], []
    for j, net in enumerate(model.nets):
        f, cache = mlp_forward(net, data[j][r2[:, j]])
        fs.append(f)
        caches.append(cache)
    s = np.sum(fs, axis=0)
    c = aligned_tuple_costs(data, model.graph, model.cost, r2)
    eps = model.epsilon
    z = _guard((s - c) / eps, model)
    e = np.exp(z)
    value = float(s.mean() - eps * e.mean() + eps)
    if not with_grads:
        return value, None
    g = (1.0 - e) / b
    return value, [mlp_backward(net, cache, g) for net, cache in zip(model.nets, caches)]


def _ustat_parts(model, fs, data, rows, enum_budget):
    """Log mass of the exponential term and the one-way marginals of its tensor."""
    k, b, eps = model.k, len(rows), model.epsilon
    cg = circle_view(model.graph)
    if cg is not None:
        mats = _cost_mats_for_rows(model, data, rows)
        lm = circle_log_scaling(fs, circle_cost_log_mats(mats, cg), eps)
        log_mass = circle.circle_log_trace(lm) - k * np.log(b)
        margs = [np.exp(circle.circle_log_marginal(lm, j) - k * np.log(b)) for j in range(k)]
        return log_mass, margs
    if float(b) ** k > enum_budget:
        raise BudgetExceededError(float(b) ** k, enum_budget, what=f"b^k = {b}^{k}")
    mats = _cost_mats_for_rows(model, data, rows)
    z = -cost_tensor(mats, k, b) / eps
    for j, f in enumerate(fs):
        shape = [1] * k
        shape[j] = b
        z = z + (f / eps).reshape(shape)
    _guard(z, model)
    z -= k * np.log(b)
    log_mass = float(logsumexp(z))
    margs = [np.exp(logsumexp(z, axis=tuple(a for a in range(k) if a != j))) for j in range(k)]
    return log_mass, margs


def _cost_mats_for_rows(model, data, rows):
    cost = model.cost
    mats = {}
    for i, j in model.graph.edges:
        if cost.by_index:
            mats[(i, j)] = cost.pair_matrix(i, j, rows, rows)
        else:
            mats[(i, j)] = cost.pair_matrix(i, j, data[i][rows], data[j][rows])
    return CostMatrixSet(mats, cost.scale(model.k))


def ustat_batch_objective(model: NemotModel, data: MarginalDataset, rows, with_grads=True, enum_budget=DEFAULT_ENUM_BUDGET):
    """Dual objective with the exponential term averaged over all ``b^k`` cross tuples."""
    rows = np.asarray(rows)
    b = len(rows)
    fs, caches = [], []
    for j, net in enumerate(model.nets):
        f, cache = mlp_forward(net, data[j][rows])
        fs.append(f)
        caches.append(cache)
    log_mass, margs = _ustat_parts(model, fs, data, rows, enum_budget)
    eps = model.epsilon
    value = float(sum(f.mean() for f in fs) - eps * np.exp(log_mass) + eps)
    if not with_grads:
        return value, None
    return value, [mlp_backward(net, cache, 1.0 / b - m) for net, cache, m in zip(model.nets, caches, margs)]


@dataclass
class NemotEstimate:
    value: float
    trace: list  # per epoch: list of batch objectives
    epoch_times: list  # per epoch: {"objective": s, "backprop": s, "total": s}
    config: dict
    cap_events: int = 0

    @property
    def epochs(self):
        return len(self.trace)


def train_nemot(
    data: MarginalDataset,
    model: NemotModel,
    loss: str = "aligned",
    batch_mode: str = "aligned",
    eval_chunk: int = 4096,
) -> NemotEstimate:
    """Gradient ascent over all k networks jointly, then a full-data evaluation.

    ``loss`` is ``"aligned"`` (paired tuples) or ``"ustat"`` (all cross tuples
    of the batch). ``batch_mode="independent"`` draws a separate permutation
    per marginal.
    """
    cfg = model.config
    n, k = data.n, data.k
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds n={n}")
    if loss not in ("aligned", "ustat"):
        raise ValueError(f"unknown loss {loss!r}")
    if batch_mode not in ("aligned", "independent"):
        raise ValueError(f"unknown batch mode {batch_mode!r}")
    rng = np.random.default_rng([cfg.seed, 1])
    flat = flatten_params(model.nets)
    state = AdamState.zeros_like([flat])
    gbuf = np.empty_like(flat)
    trace, times = [], []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        if batch_mode == "aligned" or loss == "ustat":
            order = rng.permutation(n)
        else:
            order = np.stack([rng.permutation(n) for _ in range(k)], axis=1)
        t_obj = t_bp = 0.0
        values = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start:start + cfg.batch_size]
            t0 = time.perf_counter()
            try:
                if loss == "aligned":
                    value, grads = _objective_and_grads(model, data, rows)
                else:
                    value, grads = _objective_and_grads(model, data, rows, ustat=True)
            except NumericalError as exc:
                raise TrainingError(f"objective failed ({exc})", epoch, bi) from exc
            t1 = time.perf_counter()
            g = flatten_grads(grads, out=gbuf)
            norm = float(np.sqrt(g @ g))
            if not np.isfinite(value) or not np.isfinite(norm):
                raise TrainingError("non-finite objective or gradient", epoch, bi)
            # ascent: step along -grad of the negated objective, clipped jointly
            g *= -min(1.0, cfg.clip_norm / norm) if norm > 0 else -1.0
            adam_step(state, [flat], [g], lr)
            for net in model.nets:
                net.version += 1
            t_bp += time.perf_counter() - t1
            t_obj += t1 - t0
            values.append(value)
        trace.append(values)
        times.append({"objective": t_obj, "backprop": t_bp, "total": t_obj + t_bp})
        log.debug("epoch %d lr=%.3g median batch objective %.6g", epoch, lr, np.median(values))
    if loss == "ustat":
        value = ustat_objective(model, data)
    else:
        value = evaluate_nemot(model, data, eval_chunk)
    return NemotEstimate(value, trace, times, cfg.to_dict(), model.cap_events)


def _objective_and_grads(model, data, rows, ustat=False):
    # forward timing is folded into the objective, backward into backprop by the caller
    if ustat:
        return ustat_batch_objective(model, data, rows)
    return nemot_batch_objective(model, data, rows)


def evaluate_nemot(model: NemotModel, data: MarginalDataset, chunk: int = 4096) -> float:
    """Aligned-tuple objective on all ``n`` tuples, streamed in chunks."""
    n, eps = data.n, model.epsilon
    sums = np.empty(n)
    exps = np.empty(n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        s = np.sum(model.potentials(data, rows), axis=0)
        c = aligned_tuple_costs(data, model.graph, model.cost, rows)
        z = _guard((s - c) / eps, model)
        sums[rows] = s
        exps[rows] = np.exp(z)
    return float(sums.sum() / n - eps * exps.sum() / n + eps)


def ustat_objective(model: NemotModel, data: MarginalDataset, enum_budget=DEFAULT_ENUM_BUDGET) -> float:
    """U-statistic version of the full-data objective (circle or enumerable instances)."""
    return ustat_batch_objective(model, data, np.arange(data.n), with_grads=False, enum_budget=enum_budget)[0]


# -- neural plan ---------------------------------------------------------------


def neural_plan_density(model: NemotModel, tuple_points) -> np.ndarray | float:
    """``exp((sum_j f_j(x_j) - c(x)) / eps)`` for one tuple or a batch of tuples."""
    pts = [np.asarray(p, dtype=np.float64) for p in tuple_points]
    single = pts[0].ndim == 1
    if single:
        pts = [p[None, :] for p in pts]
    s = np.sum([mlp_forward(net, p)[0] for net, p in zip(model.nets, pts)], axis=0)
    c = point_tuple_costs(pts, model.graph, model.cost)
    z = _guard((s - c) / model.epsilon, model)
    out = np.exp(z)
    return float(out[0]) if single else out


def neural_plan_tensor(model: NemotModel, data: MarginalDataset, enum_budget=DEFAULT_ENUM_BUDGET) -> np.ndarray:
    """Discrete neural plan over all ``n^k`` tuples, normalized to sum to 1."""
    k, n = data.k, data.n
    if float(n) ** k > enum_budget:
        raise BudgetExceededError(float(n) ** k, enum_budget)
    fs = model.potentials(data)
    z = -cost_tensor(pairwise_cost_matrices(data, model.graph, model.cost), k, n) / model.epsilon
    for j, f in enumerate(fs):
        shape = [1] * k
        shape[j] = n
        z = z + (f / model.epsilon).reshape(shape)
    z -= logsumexp(z)
    return np.exp(z)


# -- circle U-statistic machinery ----------------------------------------------


@dataclass
class CircleScalingMatrices:
    """Entrywise logs of ``L_i = exp((f_i (+) f_{i+1} / 2 - C_i) / eps)``, i = 0..k-1."""

    logs: list
    epsilon: float

    def __post_init__(self):
        n = self.logs[0].shape[0]
        for m in self.logs:
            if m.shape != (n, n):
                raise ValueError("scaling matrices must all be n x n")

    @property
    def k(self):
        return len(self.logs)

    @property
    def n(self):
        return self.logs[0].shape[0]

    @property
    def matrices(self):
        return [np.exp(m) for m in self.logs]

    @classmethod
    def from_matrices(cls, mats, epsilon):
        mats = [np.asarray(m, dtype=np.float64) for m in mats]
        if any(np.any(m <= 0) for m in mats):
            raise ValueError("scaling matrices must be strictly positive")
        return cls([np.log(m) for m in mats], epsilon)


def circle_cost_matrices(data: MarginalDataset, graph: CostGraph, cost: PairwiseCost) -> list:
    """Scaled oriented matrices ``C_i[a, b] = c(x_{i,a}, x_{i+1,b})``."""
    return circle_cost_log_mats(pairwise_cost_matrices(data, graph, cost), graph)


def build_L_matrices(model_or_potentials, data: MarginalDataset, epsilon=None, graph=None, cost=None) -> CircleScalingMatrices:
    """Scaling matrices from a circle-graph model, or from potential vectors."""
    if isinstance(model_or_potentials, NemotModel):
        model = model_or_potentials
        fs = model.potentials(data)
        graph, cost = model.graph, model.cost
        epsilon = model.epsilon if epsilon is None else epsilon
    else:
        fs = [np.asarray(f, dtype=np.float64) for f in model_or_potentials]
        cost = cost or PairwiseCost()
    graph = circle_view(graph) if graph is not None else None
    if graph is None:
        raise ValueError("scaling matrices are defined for circle graphs only")
    logs = circle_log_scaling(fs, circle_cost_matrices(data, graph, cost), epsilon)
    top = max(float(np.max(m)) for m in logs)
    if not np.isfinite(top):
        raise NumericalError("non-finite scaling exponent", top)
    return CircleScalingMatrices(logs, epsilon)


def ustat_exponential_circle(L: CircleScalingMatrices) -> float:
    """``Tr(L_0 L_1 ... L_{k-1}) / n^k + eps``."""
    return float(np.exp(circle.circle_log_trace(L.logs) - L.k * np.log(L.n)) + L.epsilon)


def ustat_exponential_bruteforce(fs, data: MarginalDataset, graph: CostGraph, epsilon: float, cost=None, enum_budget=DEFAULT_ENUM_BUDGET) -> float:
    """Mean over all ``n^k`` tuples of ``exp((sum f - c)/eps)``, plus ``eps``.

    ``fs`` is a :class:`NemotModel` or a list of potential vectors.
    """
    if isinstance(fs, NemotModel):
        cost = fs.cost
        fs = fs.potentials(data)
    cost = cost or PairwiseCost()
    k, n = data.k, data.n
    if float(n) ** k > enum_budget:
        raise BudgetExceededError(float(n) ** k, enum_budget)
    mats = pairwise_cost_matrices(data, graph, cost)
    total = 0.0
    for idx in np.ndindex(*(n,) * k):
        s = sum(f[a] for f, a in zip(fs, idx))
        c = mats.scale * sum(mats.matrices[(i, j)][idx[i], idx[j]] for i, j in graph.edges)
        total += np.exp((s - c) / epsilon)
    return float(total / n**k + epsilon)


def pairwise_plan_marginal_circle(L: CircleScalingMatrices, u: int, v: int, normalize: bool = False) -> np.ndarray:
    """Pairwise marginal between vertices ``u < v`` of the circle plan."""
    return circle.circle_pairwise_marginal(L.logs, u, v, normalize=normalize)


def unregularized_cost_circle(C, L: CircleScalingMatrices) -> float:
    """``sum_i <C_i, normalized pairwise marginal (i, i+1)>``.

    ``C`` is the list of scaled oriented circle cost matrices.
    """
    k = L.k
    total = 0.0
    for i in range(k):
        j = (i + 1) % k
        if j > i:
            m = pairwise_plan_marginal_circle(L, i, j, normalize=True)
            total += float(np.sum(C[i] * m))
        else:
            m = pairwise_plan_marginal_circle(L, j, i, normalize=True)
            total += float(np.sum(C[i] * m.T))
    return total


# -- persistence ---------------------------------------------------------------


def dataset_fingerprint(data: MarginalDataset) -> str:
    h = hashlib.sha256()
    for m in data.samples:
        h.update(np.ascontiguousarray(m, dtype="<f8").tobytes())
        h.update(str(m.shape).encode())
    return h.hexdigest()


def save_model(model: NemotModel, path, data: MarginalDataset | None = None) -> None:
    meta = {
        "epsilon": model.epsilon,
        "graph": {"k": model.k, "kind": model.graph.kind, "edges": [list(e) for e in model.graph.edges]},
        "cost": {"kind": model.cost.kind, "normalization": model.cost.normalization},
        "config": model.config.to_dict(),
        "dataset": dataset_fingerprint(data) if data is not None else None,
    }
    save_checkpoint(path, model.nets, meta)


def load_model(path, cost: PairwiseCost | None = None) -> NemotModel:
    """Restore a model; precomputed costs must be passed back in via ``cost``."""
    nets, meta = load_checkpoint(path)
    g = meta["graph"]
    graph = CostGraph(g["k"], tuple(tuple(e) for e in g["edges"]), g["kind"])
    if cost is None:
        cost = PairwiseCost(meta["cost"]["kind"], meta["cost"]["normalization"])
    return NemotModel(nets, meta["epsilon"], graph, cost, TrainConfig(**meta["config"]))
