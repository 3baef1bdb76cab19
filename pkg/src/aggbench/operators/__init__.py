"""Aggregation operators behind one open / push / close interface.

Six algorithms, one registry. ``run_operator`` drives any of them over a
frame source and fills in a Metrics record; ``select_algorithm`` picks
one from what the caller knows about the input.
"""

from __future__ import annotations

from dataclasses import dataclass

from aggbench.operators.base import (
    EngineConfig,
    Operator,
    OpContext,
    collect_groups,
    run_operator,
)
from aggbench.operators.hash_sort import HashSort
from aggbench.operators.hybrid import (
    DynamicDestaging,
    FALLBACK_HASH_SORT,
    HybridHashPlan,
    OriginalHybridHash,
    PrePartitioning,
    RECURSE,
    SharedHashing,
    dd_spill_trajectory,
    fallback_controller,
    fudge_factor,
    make_cuts,
    plan_hybrid,
    plan_partitions,
    predict_dd_spills,
    sort_merge_levels,
)
from aggbench.operators.sort_based import SortBased

SORT_BASED = SortBased.algo_id
HASH_SORT = HashSort.algo_id
ORIGINAL_HH = OriginalHybridHash.algo_id
SHARED_HASH = SharedHashing.algo_id
DYNAMIC_DESTAGING = DynamicDestaging.algo_id
PRE_PARTITIONING = PrePartitioning.algo_id

OPERATORS: dict[str, type[Operator]] = {
    cls.algo_id: cls
    for cls in (
        SortBased,
        HashSort,
        OriginalHybridHash,
        SharedHashing,
        DynamicDestaging,
        PrePartitioning,
    )
}

ALGORITHM_IDS = tuple(OPERATORS)


@dataclass
class SelectorInput:
    """What the caller knows about the input before aggregation starts."""

    sorted: bool = False
    skewed: bool = False
    cardinality_confident: bool = True
    G_estimate: float = 0.0


def select_algorithm(s: SelectorInput) -> str:
    """Pick an algorithm id from the input's known shape.

    Sorted input streams through sort_based for free; skew favors
    hash_sort's early collapsing; everything else goes to
    pre_partitioning, which stays correct and cheap even when the
    cardinality estimate is a guess (underestimates only shrink its
    resident share, they never cost correctness).
    """
    if s.sorted:
        return SORT_BASED
    if s.skewed:
        return HASH_SORT
    return PRE_PARTITIONING


__all__ = [
    "ALGORITHM_IDS",
    "DYNAMIC_DESTAGING",
    "DynamicDestaging",
    "EngineConfig",
    "FALLBACK_HASH_SORT",
    "HASH_SORT",
    "HashSort",
    "HybridHashPlan",
    "OPERATORS",
    "ORIGINAL_HH",
    "OpContext",
    "Operator",
    "OriginalHybridHash",
    "PRE_PARTITIONING",
    "PrePartitioning",
    "RECURSE",
    "SHARED_HASH",
    "SORT_BASED",
    "SelectorInput",
    "SharedHashing",
    "SortBased",
    "collect_groups",
    "dd_spill_trajectory",
    "fallback_controller",
    "fudge_factor",
    "make_cuts",
    "plan_hybrid",
    "plan_partitions",
    "predict_dd_spills",
    "run_operator",
    "select_algorithm",
    "sort_merge_levels",
]
