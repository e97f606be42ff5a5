"""Log-domain multimarginal Sinkhorn for entropic MOT on empirical measures.

All marginals are uniform over their ``n`` samples. Potentials ``phi_i`` are
updated cyclically; each update makes marginal ``i`` of the plan

    P[a_0, ..., a_{k-1}] = n^{-k} exp((sum_i phi_i[a_i] - c[a]) / eps)

exactly uniform, which is exact block-coordinate ascent on the dual.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .circle import circle_log_marginal, circle_log_trace
from .core import (
    CostGraph,
    CostMatrixSet,
    MarginalDataset,
    PairwiseCost,
    build_cost_graph,
    circle_view,
    cost_tensor,
    pairwise_cost_matrices,
)
from .errors import BudgetExceededError, NumericalError

log = logging.getLogger(__name__)

DEFAULT_MAX_TUPLES = 1e8
# dense log-kernels up to this many entries are kept in memory, beyond that they are streamed
MATERIALIZE_LIMIT = 2e7


def max_tuples_budget() -> float:
    """Global dense-tensor budget; ``MULTIMOT_MAX_TUPLES`` overrides the default."""
    return float(os.environ.get("MULTIMOT_MAX_TUPLES", DEFAULT_MAX_TUPLES))


@dataclass
class DiscretePotentials:
    phis: list
    epsilon: float

    def __post_init__(self):
        self.phis = [np.asarray(p, dtype=np.float64) for p in self.phis]
        for p in self.phis:
            if not np.all(np.isfinite(p)):
                raise NumericalError("non-finite potential entries")

    @property
    def k(self):
        return len(self.phis)

    def shifted(self, consts) -> "DiscretePotentials":
        return DiscretePotentials([p + c for p, c in zip(self.phis, consts)], self.epsilon)


@dataclass
class SolverReport:
    value: float
    iterations: int
    marginal_violation: float
    converged: bool
    dual_trace: list = field(default_factory=list)


@dataclass
class PlanRepresentation:
    """Dense normalized plan tensor, or circle log-scaling matrices."""

    dense: np.ndarray | None = None
    log_scaling: list | None = None
    mass: float = 1.0

    @property
    def kind(self):
        return "dense" if self.dense is not None else "factored-circle"


# -- dense machinery ---------------------------------------------------------


class _DenseLogKernel:
    """``-c / eps`` on the full tuple grid, materialized or streamed over axis 0."""

    def __init__(self, mats: CostMatrixSet, k: int, n: int, epsilon: float):
        self.mats, self.k, self.n, self.eps = mats, k, n, epsilon
        self.full = None
        if n**k <= MATERIALIZE_LIMIT:
            self.full = -cost_tensor(mats, k, n) / epsilon
        inner = max(n ** (k - 1), 1)
        self.chunk = max(1, int(MATERIALIZE_LIMIT // (4 * inner)))

    def blocks(self):
        if self.full is not None:
            yield slice(0, self.n), self.full
            return
        k, n = self.k, self.n
        for s in range(0, n, self.chunk):
            sl = slice(s, min(n, s + self.chunk))
            m = sl.stop - sl.start
            out = np.zeros((m,) + (n,) * (k - 1))
            for (i, j), c in self.mats.matrices.items():
                shape = [1] * k
                shape[i], shape[j] = n, n
                term = c[sl] if i == 0 else c
                if i == 0:
                    shape[0] = m
                out += term.reshape(shape)
            out *= -self.mats.scale / self.eps
            yield sl, out


def _broadcast(vec, axis, k):
    shape = [1] * k
    shape[axis] = vec.shape[0]
    return vec.reshape(shape)


def _dense_log_marginals(kernel: _DenseLogKernel, phis, eps, skip=None, axes=None):
    """For each axis ``i`` in ``axes``: ``LSE`` over the other axes of
    ``(sum_{j != skip} phi_j) / eps - c / eps`` (``skip=None`` keeps every potential)."""
    k, n = kernel.k, kernel.n
    axes = range(k) if axes is None else axes
    out = {i: None for i in axes}
    for sl, blk in kernel.blocks():
        t = blk.copy()
        for j, p in enumerate(phis):
            if j == skip:
                continue
            pj = p[sl] if j == 0 else p
            t += _broadcast(pj / eps, j, k)
        for i in axes:
            red = tuple(a for a in range(k) if a != i)
            part = logsumexp(t, axis=red)
            if i == 0:
                out[i] = part if out[i] is None else np.concatenate([out[i], part])
            else:
                out[i] = part if out[i] is None else np.logaddexp(out[i], part)
    return out


def _check_budget(n, k, max_tuples):
    budget = max_tuples_budget() if max_tuples is None else max_tuples
    if float(n) ** k > budget:
        raise BudgetExceededError(float(n) ** k, budget, what=f"n^k = {n}^{k}")


def _gauge(phis, value):
    k = len(phis)
    shifts = [value / k - p.mean() for p in phis[:-1]]
    shifts.append(-sum(shifts))
    return [p + s for p, s in zip(phis, shifts)]


def _initial(init, k, n):
    if init is None:
        return [np.zeros(n) for _ in range(k)]
    phis = [np.array(p, dtype=np.float64) for p in init]
    if len(phis) != k or any(p.shape != (n,) for p in phis):
        raise ValueError(f"init must hold {k} vectors of length {n}")
    return phis


def _violation(log_marg_of_plan, n):
    return float(np.sum(np.abs(np.exp(log_marg_of_plan) - 1.0 / n)))


def sinkhorn_full(
    data: MarginalDataset,
    graph: CostGraph,
    cost: PairwiseCost | None = None,
    epsilon: float = 0.1,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    max_tuples: float | None = None,
    init=None,
):
    """Dense multimarginal Sinkhorn; returns ``(DiscretePotentials, SolverReport)``.

    ``init`` optionally warm-starts from a list of k potential vectors.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cost = cost or PairwiseCost()
    k, n = data.k, data.n
    _check_budget(n, k, max_tuples)
    kernel = _DenseLogKernel(pairwise_cost_matrices(data, graph, cost), k, n, epsilon)
    log_n = np.log(n)
    phis = _initial(init, k, n)
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        worst = 0.0
        for i in range(k):
            lse = _dense_log_marginals(kernel, phis, epsilon, skip=i, axes=[i])[i]
            # marginal i of the current plan, before its update
            worst = max(worst, _violation(phis[i] / epsilon + lse - k * log_n, n))
            phis[i] = -epsilon * (lse - (k - 1) * log_n)
            if not np.all(np.isfinite(phis[i])):
                raise NumericalError(f"non-finite potential at sweep {it}, marginal {i}")
        trace.append(float(sum(p.mean() for p in phis)))
        if worst <= tol:
            if _dense_violation(kernel, phis, epsilon) <= tol:
                converged = True
                break
    return _finish(phis, epsilon, it, converged, trace, lambda ph: _dense_stats(kernel, ph, epsilon))


def _dense_stats(kernel, phis, eps):
    k, n = kernel.k, kernel.n
    lm = _dense_log_marginals(kernel, phis, eps)
    log_n = np.log(n)
    viol = max(_violation(lm[i] - k * log_n, n) for i in range(k))
    log_mass = float(logsumexp(lm[0])) - k * log_n
    return viol, log_mass


def _dense_violation(kernel, phis, eps):
    return _dense_stats(kernel, phis, eps)[0]


def _finish(phis, eps, it, converged, trace, stats):
    viol, log_mass = stats(phis)
    value = float(sum(p.mean() for p in phis) - eps * np.exp(log_mass) + eps)
    if not np.isfinite(value):
        raise NumericalError("non-finite dual value", value)
    pots = DiscretePotentials(_gauge(phis, value), eps)
    report = SolverReport(value, it, viol, converged, trace)
    log.debug("sinkhorn: value=%.8g iters=%d violation=%.2e", value, it, viol)
    return pots, report


# -- circle machinery --------------------------------------------------------


def circle_cost_log_mats(mats: CostMatrixSet, graph: CostGraph):
    """Scaled oriented cost matrices ``C_i`` between vertex i and i+1 mod k."""
    return [mats.scale * mats[(i, j)] for i, j in graph.circle_order()]


def circle_log_scaling(phis, cmats, eps):
    """``log L_i = (phi_i (+) phi_{i+1} / 2 - C_i) / eps``."""
    k = len(phis)
    return [
        (0.5 * (phis[i][:, None] + phis[(i + 1) % k][None, :]) - cmats[i]) / eps
        for i in range(k)
    ]


def sinkhorn_circle(
    data: MarginalDataset,
    cost: PairwiseCost | None = None,
    epsilon: float = 0.1,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    graph: CostGraph | None = None,
    init=None,
):
    """Sinkhorn for a circle cost graph via products of the scaling matrices.

    Costs ``O(k^2 n^3)`` per sweep; no ``n^k`` tensor is formed.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cost = cost or PairwiseCost()
    k, n = data.k, data.n
    graph = circle_view(graph) if graph is not None else build_cost_graph("circle", k)
    if graph is None:
        raise ValueError("sinkhorn_circle requires a circle graph")
    cm = circle_cost_log_mats(pairwise_cost_matrices(data, graph, cost), graph)
    log_n = np.log(n)
    phis = _initial(init, k, n)
    trace = []
    converged = False
    it = 0

    def stats(ph):
        lm = circle_log_scaling(ph, cm, epsilon)
        viol = max(_violation(circle_log_marginal(lm, i) - k * log_n, n) for i in range(k))
        return viol, circle_log_trace(lm) - k * log_n

    for it in range(1, max_iter + 1):
        worst = 0.0
        for i in range(k):
            lm = circle_log_scaling(phis, cm, epsilon)
            marg = circle_log_marginal(lm, i) - k * log_n
            worst = max(worst, _violation(marg, n))
            phis[i] = phis[i] - epsilon * (marg + log_n)
            if not np.all(np.isfinite(phis[i])):
                raise NumericalError(f"non-finite potential at sweep {it}, marginal {i}")
        trace.append(float(sum(p.mean() for p in phis)))
        if worst <= tol and stats(phis)[0] <= tol:
            converged = True
            break
    return _finish(phis, epsilon, it, converged, trace, stats)


def solve(data, graph, cost=None, epsilon=0.1, tol=1e-6, max_iter=10_000, max_tuples=None):
    """Circle solver for circle graphs (and full graphs with k=3), dense otherwise."""
    cg = circle_view(graph)
    if cg is not None:
        return sinkhorn_circle(data, cost, epsilon, tol, max_iter, graph=cg)
    return sinkhorn_full(data, graph, cost, epsilon, tol, max_iter, max_tuples)


# -- plan and dual value -----------------------------------------------------


def plan_from_potentials(pots: DiscretePotentials, data, graph, cost=None, max_tuples=None) -> PlanRepresentation:
    """Dense plan ``n^{-k} exp((sum phi - c)/eps)``, renormalized; ``mass`` is the raw total."""
    cost = cost or PairwiseCost()
    k, n = data.k, data.n
    _check_budget(n, k, max_tuples)
    c = cost_tensor(pairwise_cost_matrices(data, graph, cost), k, n)
    expo = -c / pots.epsilon
    for i, p in enumerate(pots.phis):
        expo = expo + _broadcast(p / pots.epsilon, i, k)
    expo -= k * np.log(n)
    log_mass = float(logsumexp(expo))
    plan = np.exp(expo - log_mass)
    if not np.all(np.isfinite(plan)):
        raise NumericalError("non-finite plan entries")
    return PlanRepresentation(dense=plan, mass=float(np.exp(log_mass)))


def emot_dual_value(pots: DiscretePotentials, data, graph, cost=None, epsilon=None, max_tuples=None) -> float:
    """``sum_i mean(phi_i) - eps * mean_tuples exp((sum phi - c)/eps) + eps``."""
    cost = cost or PairwiseCost()
    eps = pots.epsilon if epsilon is None else epsilon
    k, n = data.k, data.n
    mats = pairwise_cost_matrices(data, graph, cost)
    cg = circle_view(graph)
    if cg is not None:
        lm = circle_log_scaling(pots.phis, circle_cost_log_mats(mats, cg), eps)
        log_mass = circle_log_trace(lm) - k * np.log(n)
    else:
        _check_budget(n, k, max_tuples)
        kernel = _DenseLogKernel(mats, k, n, eps)
        lm = _dense_log_marginals(kernel, pots.phis, eps, axes=[0])[0]
        log_mass = float(logsumexp(lm)) - k * np.log(n)
    return float(sum(p.mean() for p in pots.phis) - eps * np.exp(log_mass) + eps)


def primal_value(plan: np.ndarray, data, graph, cost=None, epsilon=0.1) -> float:
    """``<C, P> + eps * KL(P || uniform product)`` for a dense plan."""
    cost = cost or PairwiseCost()
    c = cost_tensor(pairwise_cost_matrices(data, graph, cost), data.k, data.n)
    ref = float(data.n) ** (-data.k)
    pos = plan > 0
    kl = float(np.sum(plan[pos] * np.log(plan[pos] / ref)))
    return float(np.sum(c * plan) + epsilon * kl)
