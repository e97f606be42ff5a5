"""Entropic multimarginal Gromov-Wasserstein via alignment matrices.

For centered Euclidean mm spaces the EMGW objective splits into a
plan-independent part ``S1`` and

    S2 = inf_A  32 sum_E ||A_ij||_F^2 + EMOT with cost c_A,
    c_A(x) = sum_E ( -4 ||x_i||^2 ||x_j||^2 - 32 x_i^T A_ij x_j ).

At a fixed plan the A-objective is quadratic with gradient
``64 A_ij - 32 X_i P_ij X_j^T`` and minimizer ``A_ij = X_i P_ij X_j^T / 2``.
The solver alternates an inner EMOT solve (Sinkhorn or NEMOT) with a
projected gradient step on every ``A_ij``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import sinkhorn
from .core import CostGraph, MarginalDataset, build_cost_graph, circle_view, pairwise_cost_matrices
from .errors import BudgetExceededError, InnerSolverError
from .neural import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MmSpaceDataset:
    data: MarginalDataset
    centered: bool = False

    @property
    def k(self):
        return self.data.k

    @property
    def n(self):
        return self.data.n

    def second_moments(self) -> np.ndarray:
        return np.array([float(np.mean(np.sum(x * x, axis=1))) for x in self.data.samples])


def center_dataset(data: MarginalDataset) -> MmSpaceDataset:
    """Subtract every marginal's empirical mean."""
    if isinstance(data, MmSpaceDataset):
        data = data.data
    centered = tuple(x - x.mean(axis=0) for x in data.samples)
    return MmSpaceDataset(MarginalDataset(centered, data.family, data.seed), centered=True)


def _as_graph(edges, k) -> CostGraph:
    if isinstance(edges, CostGraph):
        return edges
    if isinstance(edges, str):
        return build_cost_graph(edges, k)
    return CostGraph(k, tuple(tuple(e) for e in edges), "custom")


def _fourth_moment_pairs(x) -> float:
    """V-statistic mean of ``||x_a - x_b||^4`` over all ordered pairs, in closed form."""
    sq = np.sum(x * x, axis=1)
    mean = x.mean(axis=0)
    second = x.T @ x / len(x)
    w = (sq[:, None] * x).mean(axis=0)
    return float(
        2.0 * np.mean(sq**2) + 2.0 * np.mean(sq) ** 2 + 4.0 * np.sum(second * second) - 8.0 * w @ mean
    )


def s1_estimate(mm: MmSpaceDataset, edges) -> float:
    """Plug-in estimate of the plan-independent part of EMGW."""
    graph = _as_graph(edges, mm.k)
    m2 = mm.second_moments()
    quart = [_fourth_moment_pairs(x) for x in mm.data.samples]
    total = 0.0
    for i, j in graph.edges:
        total += quart[i] + quart[j] - 4.0 * m2[i] * m2[j]
    return total


@dataclass(frozen=True)
class AlignmentCost:
    """Edge-dependent pairwise cost ``-4 |x|^2 |y|^2 - 32 x^T A_ij y``.

    Plugs in wherever a :class:`~multimot.core.PairwiseCost` is accepted;
    the edge sum is not rescaled. Calling it on one point per marginal
    returns the tuple cost.
    """

    A: dict
    graph: CostGraph
    kind: str = "alignment"
    normalization: float = 1.0

    @property
    def by_index(self):
        return False

    def scale(self, k):
        return 1.0

    def _mat(self, i, j):
        if (i, j) in self.A:
            return self.A[(i, j)]
        return self.A[(j, i)].T

    def pair(self, i, j, x, y):
        a = self._mat(i, j)
        return -4.0 * np.sum(x * x, axis=1) * np.sum(y * y, axis=1) - 32.0 * np.einsum("bi,ij,bj->b", x, a, y)

    def pair_matrix(self, i, j, x, y):
        a = self._mat(i, j)
        return -4.0 * np.outer(np.sum(x * x, axis=1), np.sum(y * y, axis=1)) - 32.0 * (x @ a @ y.T)

    def __call__(self, points) -> float:
        pts = [np.atleast_1d(np.asarray(p, dtype=np.float64))[None, :] for p in points]
        return float(sum(self.pair(i, j, pts[i], pts[j])[0] for i, j in self.graph.edges))


def cost_from_A(A: dict, graph: CostGraph, dims=None) -> AlignmentCost:
    if dims is not None:
        for (i, j), a in A.items():
            if a.shape != (dims[i], dims[j]):
                raise ValueError(f"A[{i},{j}] has shape {a.shape}, expected {(dims[i], dims[j])}")
    missing = set(graph.edges) - set(A)
    if missing:
        raise ValueError(f"no alignment matrix for edges {sorted(missing)}")
    return AlignmentCost({e: np.asarray(a, dtype=np.float64) for e, a in A.items()}, graph)


def zero_alignment(mm: MmSpaceDataset, graph: CostGraph) -> dict:
    dims = mm.data.dims
    return {(i, j): np.zeros((dims[i], dims[j])) for i, j in graph.edges}


def projection_radii(mm: MmSpaceDataset, graph: CostGraph) -> dict:
    """``M_ij / 2`` with ``M_ij = sqrt(M2_i M2_j)`` from empirical second moments."""
    m2 = mm.second_moments()
    return {(i, j): 0.5 * float(np.sqrt(m2[i] * m2[j])) for i, j in graph.edges}


def project(A: dict, radii: dict) -> dict:
    out = {}
    for e, a in A.items():
        nrm = float(np.linalg.norm(a))
        r = radii[e]
        out[e] = a * (r / nrm) if nrm > r else a.copy()
    return out


def check_coupling(p, tol=1e-6):
    n_a, n_b = p.shape
    viol = max(float(np.max(np.abs(p.sum(axis=1) - 1.0 / n_a))), float(np.max(np.abs(p.sum(axis=0) - 1.0 / n_b))))
    if viol > tol:
        raise ValueError(f"pairwise plan violates uniform marginals by {viol:.3g} > {tol:.3g}")


def phi_gradient(A: dict, pairwise: dict, mm: MmSpaceDataset, tol: float | None = 1e-6) -> dict:
    """``64 A_ij - 32 X_i P_ij X_j^T`` per edge (``X_i`` holds samples as columns)."""
    out = {}
    for (i, j), a in A.items():
        p = pairwise[(i, j)]
        if tol is not None:
            check_coupling(p, tol)
        out[(i, j)] = 64.0 * a - 32.0 * (mm.data[i].T @ p @ mm.data[j])
    return out


def penalty(A: dict) -> float:
    return 32.0 * sum(float(np.sum(a * a)) for a in A.values())


def pairwise_marginal(plan: np.ndarray, i: int, j: int) -> np.ndarray:
    k = plan.ndim
    return plan.sum(axis=tuple(a for a in range(k) if a not in (i, j)))


def emgw_objective_at(A: dict, plan: np.ndarray, mm: MmSpaceDataset, epsilon: float, edges, tol=1e-6) -> float:
    """``32 sum ||A||^2 + <c_A, P> + eps KL(P || uniform product)`` for a dense plan."""
    graph = _as_graph(edges, mm.k)
    n, k = mm.n, mm.k
    for i in range(k):
        marg = plan.sum(axis=tuple(a for a in range(k) if a != i))
        if np.max(np.abs(marg - 1.0 / n)) > tol:
            raise ValueError(f"plan marginal {i} is not uniform")
    mats = pairwise_cost_matrices(mm.data, graph, cost_from_A(A, graph))
    lin = sum(float(np.sum(mats[e] * pairwise_marginal(plan, *e))) for e in graph.edges)
    pos = plan > 0
    kl = float(np.sum(plan[pos] * np.log(plan[pos] * float(n) ** k)))
    return penalty(A) + lin + epsilon * kl


def distortion_objective(plan: np.ndarray, mm: MmSpaceDataset, edges) -> float:
    """``int Delta d(P x P)`` for a dense plan, computed through pairwise marginals."""
    graph = _as_graph(edges, mm.k)
    dist = [pairwise_cost_matrices(MarginalDataset((x, x)), build_cost_graph("full", 2))[(0, 1)] for x in mm.data.samples]
    total = 0.0
    for i, j in graph.edges:
        p = pairwise_marginal(plan, i, j)
        ri, rj = p.sum(axis=1), p.sum(axis=0)
        total += float(ri @ (dist[i] ** 2) @ ri + rj @ (dist[j] ** 2) @ rj)
        total -= 2.0 * float(np.sum(p * (dist[i] @ p @ dist[j].T)))
    return total


def mgw_permutation_upper_bound(mm: MmSpaceDataset, edges, max_couplings=1e6) -> tuple[float, tuple]:
    """Best distortion over plans ``(1/n) sum_a delta(a, s_1(a), ..., s_{k-1}(a))``.

    Exhaustive over the ``(n!)^(k-1)`` permutation tuples, so only a feasible
    subset: the value bounds the unregularized MGW from above.
    """
    graph = _as_graph(edges, mm.k)
    n, k = mm.n, mm.k
    perms = list(itertools.permutations(range(n)))
    if float(len(perms)) ** (k - 1) > max_couplings:
        raise BudgetExceededError(float(len(perms)) ** (k - 1), max_couplings, what="(n!)^(k-1) couplings")
    sq = [np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1) for x in mm.data.samples]
    perm_arr = np.array(perms)
    best, arg = np.inf, None
    ident = np.arange(n)
    for rest in itertools.product(range(len(perms)), repeat=k - 2):
        fixed = [ident] + [perm_arr[r] for r in rest]
        # vectorize over the last permutation
        last = perm_arr  # (P, n)
        total = np.zeros(len(perms))
        for i, j in graph.edges:
            def dm(v):
                if v < k - 1:
                    s = fixed[v]
                    return np.broadcast_to(sq[v][np.ix_(s, s)], (len(perms), n, n))
                return sq[v][last[:, :, None], last[:, None, :]]

            total += np.mean((dm(i) - dm(j)) ** 2, axis=(1, 2))
        idx = int(np.argmin(total))
        if total[idx] < best:
            best = float(total[idx])
            arg = tuple(tuple(int(v) for v in s) for s in fixed[1:]) + (perms[idx],)
    return best, arg


# -- alternating solver ------------------------------------------------------


@dataclass
class EmgwConfig:
    epsilon: float = 0.1
    edges: object = "circle"
    outer_iters: int = 10
    step: float = 1.0 / 64.0
    a_tol: float = 1e-9
    inner: str = "sinkhorn"
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 10_000
    nemot: TrainConfig = field(default_factory=TrainConfig)
    nemot_loss: str = "aligned"
    max_tuples: float | None = None

    def __post_init__(self):
        if self.epsilon <= 0 or self.step <= 0 or self.outer_iters < 1:
            raise ValueError("epsilon, step and outer_iters must be positive")
        if self.inner not in ("sinkhorn", "nemot"):
            raise ValueError(f"unknown inner solver {self.inner!r}")


@dataclass
class EmgwResult:
    value: float
    s1: float
    penalty: float
    inner_value: float
    A: dict
    trace: list  # per round: {"round", "objective", "inner", "penalty", "step_norm"}
    pairwise: dict  # pairwise plan marginals at the final A
    plan: object = None  # final potentials or NEMOT model

    def a_norms(self) -> dict:
        return {f"{i}-{j}": float(np.linalg.norm(a)) for (i, j), a in self.A.items()}


def round_coupling(p, iters=200, tol=1e-12):
    """Nearby matrix with exactly uniform row and column sums.

    A few matrix-scaling passes, then a rank-one correction of the remaining
    marginal error (rows and columns are first scaled down so the correction
    is nonnegative).
    """
    n_a, n_b = p.shape
    r, c = np.full(n_a, 1.0 / n_a), np.full(n_b, 1.0 / n_b)
    q = p / p.sum()
    for _ in range(iters):
        q *= (r / q.sum(axis=1))[:, None]
        q *= c / q.sum(axis=0)
        if np.max(np.abs(q.sum(axis=1) - r)) < tol:
            break
    q *= np.minimum(1.0, r / q.sum(axis=1))[:, None]
    q *= np.minimum(1.0, c / q.sum(axis=0))
    er, ec = r - q.sum(axis=1), c - q.sum(axis=0)
    mass = er.sum()
    if mass > 0:
        q = q + np.outer(er, ec) / mass
    return q


class _SinkhornInner:
    def __init__(self, mm, graph, cfg):
        self.mm, self.graph, self.cfg = mm, graph, cfg
        self.init = None

    def solve(self, A):
        cost = cost_from_A(A, self.graph)
        cfg, data, graph = self.cfg, self.mm.data, self.graph
        if circle_view(graph) is not None:
            pots, rep = sinkhorn.sinkhorn_circle(
                data, cost, cfg.epsilon, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, graph=graph, init=self.init
            )
        else:
            pots, rep = sinkhorn.sinkhorn_full(
                data, graph, cost, cfg.epsilon, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, cfg.max_tuples, init=self.init
            )
        self.init = pots.phis
        # a stalled solve leaves small marginal errors; project each pairwise marginal back
        return rep.value, {e: round_coupling(p) for e, p in self.pairwise(pots, cost).items()}, pots

    def pairwise(self, pots, cost):
        data, graph = self.mm.data, self.graph
        if circle_view(graph) is not None:
            from .nemot import build_L_matrices, pairwise_plan_marginal_circle

            L = build_L_matrices(pots.phis, data, pots.epsilon, graph=graph, cost=cost)
            return {(i, j): pairwise_plan_marginal_circle(L, i, j, normalize=True) for i, j in graph.edges}
        plan = sinkhorn.plan_from_potentials(pots, data, graph, cost, self.cfg.max_tuples).dense
        return {(i, j): pairwise_marginal(plan, i, j) for i, j in graph.edges}


class _NemotInner:
    """NEMOT inner solver; the networks persist across outer rounds."""

    def __init__(self, mm, graph, cfg):
        from . import nemot

        self.nemot = nemot
        self.mm, self.graph, self.cfg = mm, graph, cfg
        self.model = nemot.init_model(mm.data, graph, cfg.epsilon, cost_from_A(zero_alignment(mm, graph), graph), cfg.nemot)

    def solve(self, A):
        nm = self.nemot
        cost = cost_from_A(A, self.graph)
        self.model.cost = cost
        est = nm.train_nemot(self.mm.data, self.model, loss=self.cfg.nemot_loss)
        data, graph = self.mm.data, self.graph
        if circle_view(graph) is not None:
            L = nm.build_L_matrices(self.model, data)
            raw = {(i, j): nm.pairwise_plan_marginal_circle(L, i, j, normalize=True) for i, j in graph.edges}
        else:
            plan = nm.neural_plan_tensor(self.model, data)
            raw = {(i, j): pairwise_marginal(plan, i, j) for i, j in graph.edges}
        # the neural plan is only approximately feasible; round each pairwise marginal
        return est.value, {e: round_coupling(p) for e, p in raw.items()}, self.model


def nemgw_alternating(data: MarginalDataset, config: EmgwConfig | None = None) -> EmgwResult:
    """Alternate inner EMOT solves and projected A steps; returns the EMGW estimate."""
    cfg = config or EmgwConfig()
    mm = center_dataset(data)
    graph = _as_graph(cfg.edges, mm.k)
    s1 = s1_estimate(mm, graph)
    radii = projection_radii(mm, graph)
    A = zero_alignment(mm, graph)
    inner = _SinkhornInner(mm, graph, cfg) if cfg.inner == "sinkhorn" else _NemotInner(mm, graph, cfg)
    trace = []
    try:
        value, pairwise, handle = inner.solve(A)
    except Exception as exc:
        raise InnerSolverError(f"inner solver failed: {exc}", 0) from exc
    for rnd in range(cfg.outer_iters):
        obj = penalty(A) + value
        try:
            grads = phi_gradient(A, pairwise, mm, tol=1e-6)
        except ValueError as exc:
            raise InnerSolverError(str(exc), rnd) from exc
        new_a = project({e: A[e] - cfg.step * grads[e] for e in A}, radii)
        step_norm = max((float(np.linalg.norm(new_a[e] - A[e])) for e in A), default=0.0)
        trace.append({"round": rnd, "objective": obj, "inner": value, "penalty": penalty(A), "step_norm": step_norm})
        A = new_a
        try:
            value, pairwise, handle = inner.solve(A)
        except Exception as exc:
            raise InnerSolverError(f"inner solver failed: {exc}", rnd) from exc
        if step_norm < cfg.a_tol:
            break
    pen = penalty(A)
    trace.append({"round": len(trace), "objective": pen + value, "inner": value, "penalty": pen, "step_norm": 0.0})
    total = s1 + pen + value
    log.debug("nemgw: S1=%.6g penalty=%.6g inner=%.6g total=%.6g", s1, pen, value, total)
    return EmgwResult(total, s1, pen, value, A, trace, pairwise, handle)
