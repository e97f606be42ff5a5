"""Entropic multimarginal optimal transport: Sinkhorn, neural estimation and EMGW."""

from .core import (
    CostGraph,
    MarginalDataset,
    PairwiseCost,
    build_cost_graph,
    cost_tuple,
    pairwise_cost,
)
from .errors import (
    BudgetExceededError,
    CorruptDataError,
    DatasetFormatError,
    DegenerateInputError,
    InnerSolverError,
    NumericalError,
    StaleCacheError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetExceededError",
    "CorruptDataError",
    "CostGraph",
    "DatasetFormatError",
    "DegenerateInputError",
    "InnerSolverError",
    "MarginalDataset",
    "NumericalError",
    "PairwiseCost",
    "StaleCacheError",
    "TrainingError",
    "build_cost_graph",
    "cost_tuple",
    "pairwise_cost",
]
