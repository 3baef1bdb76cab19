"""Operator behavior: planning, spilling, recursion, residency, selection."""

import os
import subprocess
import sys

import numpy as np
import pytest

from aggbench import _kernels as K
from aggbench.core import (
    AggSpec,
    DatasetStats,
    InvalidBudget,
    MergeOrderError,
    iter_records,
)
from aggbench.operators import (
    ALGORITHM_IDS,
    OPERATORS,
    EngineConfig,
    OpContext,
    SelectorInput,
    fallback_controller,
    make_cuts,
    plan_hybrid,
    plan_partitions,
    predict_dd_spills,
    run_operator,
    select_algorithm,
    sort_merge_levels,
)
from aggbench.operators.hybrid import FALLBACK_HASH_SORT, RECURSE
from aggbench.run_store import FrameSource

from conftest import build_dataset, drive

HYBRIDS = ("original_hh", "shared_hash", "dynamic_destaging",
           "pre_partitioning")


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


def test_partition_count_examples():
    assert plan_partitions(1200.0, 100) == 12  # ceil(1100 / 98)
    assert plan_partitions(50.0, 100) == 0     # fits in memory
    assert plan_partitions(99.0, 100) == 0
    assert plan_partitions(1e9, 100) == 98     # clamped to M - 2


def test_plan_grace_trigger():
    stats = DatasetStats(R=1000, R_t=100000, G=150.0, G_t=10000)
    plan = plan_hybrid(stats, 10, 1.0)
    assert plan.grace_levels == 1  # 150 >= 10^2, one 9-way split suffices
    plan2 = plan_hybrid(stats, 13, 1.0)
    assert plan2.grace_levels == 0  # 150 < 169
    assert plan2.P == plan_partitions(150.0, 13)


def test_plan_rejects_tiny_budget():
    stats = DatasetStats(R=10, R_t=100, G=5.0, G_t=50)
    with pytest.raises(InvalidBudget):
        plan_hybrid(stats, 3, 1.2)


def test_fallback_thresholds():
    assert fallback_controller(81, 100, 1, 5) == FALLBACK_HASH_SORT
    assert fallback_controller(50, 100, 1, 5) == RECURSE
    assert fallback_controller(10, 100, 6, 5) == FALLBACK_HASH_SORT
    assert fallback_controller(10, 100, 5, 5) == RECURSE


def test_sort_merge_levels_counts_rounds():
    # 100 frames, M=10: 12 runs, fan-in 9 -> 2 rounds
    assert sort_merge_levels(100, 10) == 2
    assert sort_merge_levels(5, 10) == 1


# ---------------------------------------------------------------------------
# correctness across operators
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("algo", ALGORITHM_IDS)
@pytest.mark.parametrize("n,m,M", [(60, 8, 8), (3000, 500, 6), (4000, 2500, 5)])
def test_operator_matches_oracle(algo, n, m, M):
    if algo == "dynamic_destaging" and M < 5:
        M = 5
    frames, want, stats, agg = build_dataset(
        n, m, seed=n + m + M, agg_names=("sum", "count", "min", "max"))
    cfg = EngineConfig(memory_frames=M, frame_size=1024, seed=3)
    drive(algo, frames, stats, agg, cfg, want=want)


@pytest.mark.parametrize("algo", ALGORITHM_IDS)
def test_empty_input(algo):
    frames, want, stats, agg = build_dataset(0, 1, seed=1)
    cfg = EngineConfig(memory_frames=8, frame_size=1024, seed=1)
    got, met, _ = drive(algo, frames, stats, agg, cfg, want=want)
    assert got == {} and met.output_groups == 0


@pytest.mark.parametrize("algo", ALGORITHM_IDS)
def test_single_hot_key_collapses(algo):
    frames, want, stats, agg = build_dataset(5000, 1, seed=2, dist="single",
                                             frame_size=512)
    cfg = EngineConfig(memory_frames=5, frame_size=512, seed=2)
    got, met, _ = drive(algo, frames, stats, agg, cfg, want=want)
    assert len(got) == 1


@pytest.mark.parametrize("algo", ALGORITHM_IDS)
@pytest.mark.parametrize("wrong", [1.0, 1e7])
def test_misestimated_cardinality_stays_correct(algo, wrong):
    frames, want, stats, agg = build_dataset(3000, 900, seed=4)
    cfg = EngineConfig(memory_frames=6, frame_size=1024, seed=4,
                       group_estimate=wrong)
    drive(algo, frames, stats, agg, cfg, want=want)


def test_metrics_deterministic_across_reruns():
    frames, want, stats, agg = build_dataset(4000, 1200, seed=5)
    for algo in ALGORITHM_IDS:
        cfg = EngineConfig(memory_frames=6, frame_size=1024, seed=9)
        _, met1, _ = drive(algo, frames, stats, agg, cfg, want=want)
        _, met2, _ = drive(algo, frames, stats, agg, cfg, want=want)
        d1, d2 = met1.as_dict(), met2.as_dict()
        for key in ("comparisons", "group_compares", "frames_written",
                    "frames_read", "frames_written_total",
                    "frames_read_total", "output_groups",
                    "spilled_partitions", "fallbacks", "grace_levels",
                    "recursion_depth", "high_water"):
            assert d1[key] == d2[key], (algo, key, d1[key], d2[key])


# ---------------------------------------------------------------------------
# sorted input path
# ---------------------------------------------------------------------------


def test_sorted_input_streams_without_runs():
    frames, want, stats, agg = build_dataset(3000, 700, seed=6,
                                             sort_keys=True)
    sealed = []
    cfg = EngineConfig(memory_frames=4, frame_size=1024, seed=6,
                       input_sorted=True)
    got, met, _ = drive(
        "sort_based", frames, stats, agg, cfg, want=want,
        observers={"run_sealed": lambda info, a, lv: sealed.append(info)})
    assert sealed == []  # streamed, nothing spilled
    assert met.frames_written == 0
    keys = list(got)
    assert keys == sorted(keys)


def test_sorted_flag_rejects_unsorted_input():
    frames, _, stats, agg = build_dataset(2000, 500, seed=7)
    cfg = EngineConfig(memory_frames=4, frame_size=1024, seed=7,
                       input_sorted=True)
    with pytest.raises(MergeOrderError):
        drive("sort_based", frames, stats, agg, cfg)


def test_sort_based_output_is_key_sorted_after_spill():
    frames, want, stats, agg = build_dataset(4000, 1500, seed=8)
    cfg = EngineConfig(memory_frames=5, frame_size=1024, seed=8)
    got, met, _ = drive("sort_based", frames, stats, agg, cfg, want=want)
    keys = list(got)
    assert keys == sorted(keys)
    assert met.frames_written > 0


# ---------------------------------------------------------------------------
# budget edges
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("algo,min_m", [("sort_based", 3), ("hash_sort", 3),
                                        ("original_hh", 4),
                                        ("shared_hash", 4),
                                        ("dynamic_destaging", 5),
                                        ("pre_partitioning", 4)])
def test_budget_floor(algo, min_m):
    frames, want, stats, agg = build_dataset(500, 120, seed=9)
    cfg = EngineConfig(memory_frames=min_m - 1, frame_size=1024, seed=9)
    with pytest.raises(InvalidBudget):
        drive(algo, frames, stats, agg, cfg)
    cfg2 = EngineConfig(memory_frames=min_m, frame_size=1024, seed=9)
    drive(algo, frames, stats, agg, cfg2, want=want)


# ---------------------------------------------------------------------------
# hybrid internals
# ---------------------------------------------------------------------------


def test_shared_hashing_relocates_within_budget():
    # big enough to force the first spill, the rebuild, and a second spill
    frames, want, stats, agg = build_dataset(12000, 4000, seed=10,
                                             frame_size=512)
    cfg = EngineConfig(memory_frames=12, frame_size=512, seed=10)
    got, met, op = drive("shared_hash", frames, stats, agg, cfg, want=want)
    assert met.spilled_partitions > 0
    assert met.high_water <= 12


def test_original_hh_inmemory_plan_overflow_converts():
    # cardinality lied low: the P=0 plan must still finish out of memory
    frames, want, stats, agg = build_dataset(6000, 2000, seed=11)
    sealed = []
    cfg = EngineConfig(memory_frames=6, frame_size=1024, seed=11,
                       group_estimate=2.0)
    got, met, _ = drive(
        "original_hh", frames, stats, agg, cfg, want=want,
        observers={"run_sealed": lambda info, a, lv: sealed.append(info)})
    assert sealed, "overflow must cut the table to a run"


def test_dynamic_destaging_spill_order_deterministic():
    frames, want, stats, agg = build_dataset(8000, 900, seed=12,
                                             frame_size=512)
    cfg = EngineConfig(memory_frames=10, frame_size=512, seed=12)
    _, _, op1 = drive("dynamic_destaging", frames, stats, agg, cfg, want=want)
    _, _, op2 = drive("dynamic_destaging", frames, stats, agg, cfg, want=want)
    assert op1._spill_order == op2._spill_order
    assert op1._spill_order, "expected at least one eviction"


def test_dynamic_destaging_spills_match_prediction():
    frames, want, stats, agg = build_dataset(20000, 3000, seed=13,
                                             frame_size=1024)
    cfg = EngineConfig(memory_frames=24, frame_size=1024, seed=13)
    _, met, op = drive("dynamic_destaging", frames, stats, agg, cfg,
                       want=want)
    assert op.plan.P_s is not None
    assert abs(met.spilled_partitions - op.plan.P_s) <= 1


def test_pre_partitioning_keeps_resident_keys_out_of_spill():
    resident_at = {}
    spilled_hits = []

    def on_frozen(table, level):
        resident_at[level] = {k for k, _ in table.iter_groups()}

    def on_sealed(info, algo, level):
        if algo != "pre_partitioning" or level not in resident_at:
            return
        rd = info.open()
        buf = np.zeros(512, np.uint8)
        while rd.read_into(buf):
            for k, _ in iter_records(buf, agg.state_width):
                if k in resident_at[level]:
                    spilled_hits.append((level, k))
            buf[:] = 0
        rd.close()

    frames, want, stats, agg = build_dataset(9000, 3000, seed=14,
                                             frame_size=512)
    cfg = EngineConfig(memory_frames=8, frame_size=512, seed=14)
    got, met, _ = drive(
        "pre_partitioning", frames, stats, agg, cfg, want=want,
        observers={"pp_frozen": on_frozen, "run_sealed": on_sealed})
    assert resident_at, "expected at least one table freeze"
    assert spilled_hits == []
    assert met.spilled_partitions > 0


def test_recursive_level_rehashes_with_fresh_seed():
    # feed a child operator keys that all share one parent partition; a
    # reused seed would push them all into a single child partition again
    seed = 15
    cuts = make_cuts(0.25, 4)
    part_seed0 = K.mix_seed(seed, 0x11)
    chosen = []
    i = 0
    while len(chosen) < 900:
        key = f"k{i}".encode()
        kb = np.frombuffer(key, np.uint8)
        u = K.hash_bytes(kb, 0, len(key), part_seed0)
        if int(np.searchsorted(cuts, u, side="right")) == 2:
            chosen.append(i)
        i += 1
    frames, want, stats, agg = build_dataset(3600, len(chosen), seed=seed)
    # rebuild with only the chosen keys
    import random as _r
    rng = _r.Random(seed)
    from aggbench.core import frames_from_records
    recs = []
    oracle = {}
    for _ in range(3600):
        key = f"k{rng.choice(chosen)}".encode()
        val = float(rng.randrange(100))
        recs.append((key, [val, 1.0]))
        cur = oracle.setdefault(key, [0.0, 0.0])
        cur[0] += val
        cur[1] += 1.0
    frames = frames_from_records(recs, 2, 1024)
    want = {k: v for k, v in oracle.items()}
    stats = DatasetStats(R=len(frames), R_t=3600, G=900 * 26 / 1024, G_t=900)

    sealed = []
    cfg = EngineConfig(memory_frames=6, frame_size=1024, seed=seed)
    with OpContext(cfg, agg) as ctx:
        ctx.observers["run_sealed"] = (
            lambda info, a, lv: sealed.append((lv, info.records)))
        op = OPERATORS["original_hh"](ctx, stats, level=1)
        src = FrameSource.from_frames(frames, 1024)
        got = {}
        for fr in run_operator(op, src):
            for k, vals in iter_records(fr, agg.out_width):
                got[k] = list(vals)
    assert set(got) == set(want)
    lvl1 = [r for lv, r in sealed if lv == 1]
    assert len(lvl1) >= 2, "expected the child level to split its input"
    assert max(lvl1) / sum(lvl1) < 0.95


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def test_select_algorithm_decision_table():
    assert select_algorithm(SelectorInput(sorted=True)) == "sort_based"
    assert select_algorithm(
        SelectorInput(sorted=True, skewed=True)) == "sort_based"
    assert select_algorithm(SelectorInput(skewed=True)) == "hash_sort"
    assert select_algorithm(SelectorInput()) == "pre_partitioning"
    assert select_algorithm(
        SelectorInput(cardinality_confident=False)) == "pre_partitioning"


# ---------------------------------------------------------------------------
# backend parity
# ---------------------------------------------------------------------------


def test_fallback_backend_metrics_match():
    code = r"""
import json
from conftest import build_dataset, drive
from aggbench.operators import ALGORITHM_IDS, EngineConfig
out = {}
for algo in ALGORITHM_IDS:
    frames, want, stats, agg = build_dataset(2500, 800, seed=21)
    cfg = EngineConfig(memory_frames=6, frame_size=1024, seed=21)
    _, met, _ = drive(algo, frames, stats, agg, cfg, want=want)
    d = met.as_dict()
    out[algo] = [d[k] for k in ("comparisons", "group_compares",
                                "frames_written", "frames_read",
                                "output_groups", "high_water")]
print(json.dumps(out))
"""
    import json
    here = os.path.dirname(os.path.abspath(__file__))

    def run_with(env_flag):
        env = dict(os.environ)
        env["AGGBENCH_NO_NUMBA"] = env_flag
        env["PYTHONPATH"] = here + os.pathsep + env.get("PYTHONPATH", "")
        res = subprocess.run([sys.executable, "-c", code], cwd=here,
                             capture_output=True, text=True, env=env)
        assert res.returncode == 0, res.stderr
        return json.loads(res.stdout.strip().splitlines()[-1])

    jit = run_with("")
    plain = run_with("1")
    assert jit == plain
