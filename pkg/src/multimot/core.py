"""Datasets, cost graphs and pairwise-decomposable multimarginal costs.

Marginals are indexed from 0. A cost graph over ``k`` vertices lists the
unordered pairs ``(i, j)``, ``i < j``, whose pairwise terms enter the cost

    c(x_0, ..., x_{k-1}) = scale * sum_{(i, j) in E} c~(x_i, x_j)

where ``scale`` defaults to ``1 / k``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

GRAPH_KINDS = ("full", "circle", "tree", "custom")
COST_KINDS = ("sqeuclidean", "cosine", "precomputed")


@dataclass(frozen=True)
class MarginalDataset:
    """k marginals, each an ``n x d_i`` matrix of samples."""

    samples: tuple
    family: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        mats = tuple(np.ascontiguousarray(np.asarray(s, dtype=np.float64)) for s in self.samples)
        mats = tuple(m.reshape(-1, 1) if m.ndim == 1 else m for m in mats)
        if len(mats) < 2:
            raise ValueError(f"need at least 2 marginals, got {len(mats)}")
        n = mats[0].shape[0]
        for i, m in enumerate(mats):
            if m.ndim != 2:
                raise ValueError(f"marginal {i} must be 2-D, got shape {m.shape}")
            if m.shape[0] != n:
                raise ValueError(f"marginal {i} has {m.shape[0]} rows, expected {n}")
            if m.shape[1] < 1:
                raise ValueError(f"marginal {i} has zero dimension")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"marginal {i} has non-finite entries")
            m.setflags(write=False)
        if n < 1:
            raise ValueError("need at least one sample per marginal")
        object.__setattr__(self, "samples", mats)

    @property
    def k(self) -> int:
        return len(self.samples)

    @property
    def n(self) -> int:
        return self.samples[0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [m.shape[1] for m in self.samples]

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, rows) -> "MarginalDataset":
        """Keep the same rows of every marginal."""
        rows = np.asarray(rows)
        return MarginalDataset(tuple(m[rows] for m in self.samples), self.family, self.seed)


@dataclass(frozen=True)
class CostGraph:
    k: int
    edges: tuple
    kind: str = "custom"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"cost graph needs k >= 2, got {self.k}")
        norm = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            if not (0 <= i < self.k and 0 <= j < self.k):
                raise ValueError(f"edge ({i}, {j}) out of range for k={self.k}")
            norm.append((min(i, j), max(i, j)))
        if len(set(norm)) != len(norm):
            raise ValueError("duplicate edges")
        object.__setattr__(self, "edges", tuple(sorted(norm)))
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        m = len(self.edges)
        if self.kind == "full" and m != self.k * (self.k - 1) // 2:
            raise ValueError("full graph must contain every pair")
        if self.kind == "circle" and set(self.edges) != set(_circle_edges(self.k)):
            raise ValueError("circle graph must contain exactly the edges (i, i+1 mod k)")
        if self.kind == "tree" and (m != self.k - 1 or not _connected(self.k, self.edges)):
            raise ValueError("tree graph must be connected with k-1 edges")

    def circle_order(self) -> list[tuple[int, int]]:
        """Oriented circle edges (i, i+1 mod k), in order."""
        if self.kind != "circle":
            raise ValueError("circle_order requires a circle graph")
        return [(i, (i + 1) % self.k) for i in range(self.k)]


def _circle_edges(k):
    return [(min(i, (i + 1) % k), max(i, (i + 1) % k)) for i in range(k)]


def _connected(k, edges):
    adj = {v: set() for v in range(k)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen, stack = {0}, [0]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == k


def build_cost_graph(kind: str, k: int) -> CostGraph:
    """Build a ``full``, ``circle`` or ``tree`` (path 0-1-...-k-1) graph."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if kind == "full":
        return CostGraph(k, tuple(itertools.combinations(range(k), 2)), "full")
    if kind == "circle":
        if k < 3:
            raise ValueError("a circle graph needs k >= 3 (k=2 would duplicate the edge)")
        return CostGraph(k, tuple(_circle_edges(k)), "circle")
    if kind in ("tree", "path", "tree-path"):
        return CostGraph(k, tuple((i, i + 1) for i in range(k - 1)), "tree")
    raise ValueError(f"unknown graph kind {kind!r}")


def circle_view(graph: CostGraph) -> CostGraph | None:
    """The graph as a circle if it is one (a full graph on 3 vertices counts), else None."""
    if graph.kind == "circle":
        return graph
    if graph.k >= 3 and set(graph.edges) == set(_circle_edges(graph.k)):
        return build_cost_graph("circle", graph.k)
    return None


@dataclass(frozen=True)
class PairwiseCost:
    """Pairwise cost c~ and the multiplier applied to the edge sum.

    ``normalization=None`` means ``1/k``. The ``precomputed`` kind reads
    ``matrices[(i, j)][a, b]`` and is addressed by sample index, not by point.
    """

    kind: str = "sqeuclidean"
    normalization: float | None = None
    matrices: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "precomputed":
            if not self.matrices:
                raise ValueError("precomputed cost needs per-edge matrices")
            mats = {}
            for (i, j), m in self.matrices.items():
                m = np.asarray(m, dtype=np.float64)
                if m.ndim != 2 or not np.all(np.isfinite(m)):
                    raise ValueError(f"precomputed matrix for edge {(i, j)} must be finite 2-D")
                mats[(int(i), int(j))] = m
            object.__setattr__(self, "matrices", mats)

    @property
    def by_index(self) -> bool:
        return self.kind == "precomputed"

    def scale(self, k: int) -> float:
        return 1.0 / k if self.normalization is None else float(self.normalization)

    def _precomputed(self, i, j):
        if (i, j) in self.matrices:
            return self.matrices[(i, j)]
        if (j, i) in self.matrices:
            return self.matrices[(j, i)].T
        raise KeyError(f"no precomputed matrix for edge {(i, j)}")

    def pair(self, i, j, x, y):
        """Costs between aligned rows of ``x`` (marginal i) and ``y`` (marginal j)."""
        if self.by_index:
            return self._precomputed(i, j)[np.asarray(x), np.asarray(y)]
        if self.kind == "sqeuclidean":
            diff = x - y
            return np.einsum("bd,bd->b", diff, diff)
        nx = np.linalg.norm(x, axis=1)
        ny = np.linalg.norm(y, axis=1)
        if np.any(nx == 0) or np.any(ny == 0):
            raise DegenerateInputError("cosine cost is undefined for zero vectors")
        return 1.0 - np.einsum("bd,bd->b", x, y) / (nx * ny)

    def pair_matrix(self, i, j, x, y):
        """Full ``len(x) x len(y)`` matrix of pairwise costs."""
        if self.by_index:
            return self._precomputed(i, j)[np.ix_(np.asarray(x), np.asarray(y))]
        if self.kind == "sqeuclidean":
            sq = (
                np.einsum("ad,ad->a", x, x)[:, None]
                + np.einsum("bd,bd->b", y, y)[None, :]
                - 2.0 * x @ y.T
            )
            return np.maximum(sq, 0.0)
        nx = np.linalg.norm(x, axis=1)
        ny = np.linalg.norm(y, axis=1)
        if np.any(nx == 0) or np.any(ny == 0):
            raise DegenerateInputError("cosine cost is undefined for zero vectors")
        return 1.0 - (x @ y.T) / np.outer(nx, ny)


def pairwise_cost(x, y, kind: PairwiseCost | str = "sqeuclidean") -> float:
    """c~(x, y) for two single points."""
    cost = PairwiseCost(kind) if isinstance(kind, str) else kind
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"point shapes differ: {x.shape} vs {y.shape}")
    return float(cost.pair(0, 1, x[None, :], y[None, :])[0])


def cost_tuple(points, graph: CostGraph, cost: PairwiseCost | None = None) -> float:
    """scale * sum over edges of c~(x_i, x_j) for one point per marginal."""
    cost = cost or PairwiseCost()
    if len(points) != graph.k:
        raise ValueError(f"expected {graph.k} points, got {len(points)}")
    pts = [np.atleast_1d(np.asarray(p, dtype=np.float64))[None, :] for p in points]
    total = 0.0
    for i, j in graph.edges:
        if pts[i].shape[1] != pts[j].shape[1] and cost.kind != "precomputed":
            raise ValueError(f"dimension mismatch on edge {(i, j)}")
        total += float(cost.pair(i, j, pts[i], pts[j])[0])
    return cost.scale(graph.k) * total


@dataclass(frozen=True)
class CostMatrixSet:
    """One unscaled ``n x n`` matrix of c~ values per edge, plus the edge-sum scale."""

    matrices: dict
    scale: float

    def __getitem__(self, edge):
        i, j = edge
        if (i, j) in self.matrices:
            return self.matrices[(i, j)]
        return self.matrices[(j, i)].T

    def scaled(self, i, j):
        return self.scale * self[(i, j)]


def _edge_inputs(data, cost, i):
    return np.arange(data.n) if cost.by_index else data[i]


def pairwise_cost_matrices(data: MarginalDataset, graph: CostGraph, cost: PairwiseCost | None = None) -> CostMatrixSet:
    cost = cost or PairwiseCost()
    if data.k != graph.k:
        raise ValueError(f"dataset has k={data.k}, graph has k={graph.k}")
    mats = {}
    for i, j in graph.edges:
        m = cost.pair_matrix(i, j, _edge_inputs(data, cost, i), _edge_inputs(data, cost, j))
        m.setflags(write=False)
        mats[(i, j)] = m
    return CostMatrixSet(mats, cost.scale(graph.k))


def aligned_tuple_costs(data: MarginalDataset, graph: CostGraph, cost: PairwiseCost, rows) -> np.ndarray:
    """Scaled costs of tuples; ``rows`` is ``(b,)`` shared indices or ``(b, k)``."""
    rows = np.asarray(rows)
    if rows.ndim == 1:
        rows = np.repeat(rows[:, None], data.k, axis=1)
    out = np.zeros(rows.shape[0])
    for i, j in graph.edges:
        if cost.by_index:
            out += cost.pair(i, j, rows[:, i], rows[:, j])
        else:
            out += cost.pair(i, j, data[i][rows[:, i]], data[j][rows[:, j]])
    return cost.scale(graph.k) * out


def point_tuple_costs(points, graph: CostGraph, cost: PairwiseCost) -> np.ndarray:
    """Scaled costs for aligned point batches, ``points[i]`` of shape ``(b, d_i)``."""
    if cost.by_index:
        raise ValueError("precomputed costs are only defined on dataset indices")
    b = points[0].shape[0]
    out = np.zeros(b)
    for i, j in graph.edges:
        out += cost.pair(i, j, points[i], points[j])
    return cost.scale(graph.k) * out


def cost_tensor(mats: CostMatrixSet, k: int, n: int) -> np.ndarray:
    """Dense ``n^k`` scaled cost tensor (small instances only)."""
    out = np.zeros((n,) * k)
    for (i, j), m in mats.matrices.items():
        shape = [1] * k
        shape[i], shape[j] = n, n
        out = out + m.reshape(shape)
    return mats.scale * out
