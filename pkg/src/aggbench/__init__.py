"""Memory-bounded group-by aggregation: operators, cost models, benchmarks."""

from aggbench.core import (
    AGGREGATES,
    AggSpec,
    AggregateFunction,
    BudgetExhausted,
    CapacityExceeded,
    DatasetStats,
    FrameAllocator,
    FrameFull,
    InvalidBudget,
    InvalidRecord,
    Metrics,
    DEFAULT_FRAME_SIZE,
)

__version__ = "0.1.0"

__all__ = [
    "AGGREGATES",
    "AggSpec",
    "AggregateFunction",
    "BudgetExhausted",
    "CapacityExceeded",
    "DatasetStats",
    "FrameAllocator",
    "FrameFull",
    "InvalidBudget",
    "InvalidRecord",
    "Metrics",
    "DEFAULT_FRAME_SIZE",
    "__version__",
]
