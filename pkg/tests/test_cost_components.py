"""Closed-form component checks against frozen values and MC oracles."""

import math

import numpy as np
import pytest

from aggbench import cost_components as cc
from aggbench.core import ModelDomainError
from aggbench.run_store import plan_merge_rounds


def test_expected_groups_frozen():
    # 500 of 1000 records over 100 uniform groups: 100*(1 - (1/2)^10)
    assert cc.expected_groups(500, 1000, 100) == pytest.approx(99.90234375)


def test_expected_records_frozen():
    # records needed to see 50 of 100 groups hiding in 1000 records
    assert cc.expected_records(50, 1000, 100) == pytest.approx(66.96701, abs=1e-3)


def test_expected_groups_monte_carlo():
    rng = np.random.default_rng(7)
    n, m, r = 1200, 60, 300
    trials = 400
    seen = 0
    for _ in range(trials):
        keys = np.repeat(np.arange(m), n // m)
        rng.shuffle(keys)
        seen += len(np.unique(keys[:r]))
    mc = seen / trials
    assert cc.expected_groups(r, n, m) == pytest.approx(mc, rel=0.02)


def test_expected_records_monte_carlo():
    rng = np.random.default_rng(11)
    n, m, k = 1000, 100, 70
    trials = 400
    tot = 0
    for _ in range(trials):
        keys = np.repeat(np.arange(m), n // m)
        rng.shuffle(keys)
        distinct = np.zeros(m, bool)
        cnt = 0
        for i, key in enumerate(keys):
            if not distinct[key]:
                distinct[key] = True
                cnt += 1
                if cnt == k:
                    tot += i + 1
                    break
    mc = tot / trials
    assert cc.expected_records(k, n, m) == pytest.approx(mc, rel=0.05)


def test_sort_comparisons_frozen():
    # all-distinct case: 2*(n/m)*(m-1)*ln(m-2) with n = m = 10
    assert cc.sort_comparisons(10, 10) == pytest.approx(37.429948, abs=1e-4)


def test_sort_comparisons_monotone_in_duplicates():
    # more duplication with the same n must not cost more
    base = cc.sort_comparisons(10000, 5000)
    heavy = cc.sort_comparisons(10000, 50)
    assert heavy < base


def test_sort_comparisons_small_m():
    # one value class: a single isolating pass of n-1 comparisons
    assert cc.sort_comparisons(100, 1) == pytest.approx(99.0)
    # two classes: n-1 then (n/2)-1 over the surviving half
    assert cc.sort_comparisons(100, 2) == pytest.approx(148.0)
    # fractional class counts (slot-chain sorting) interpolate smoothly
    lo = cc.sort_comparisons(100, 1.0)
    mid = cc.sort_comparisons(100, 1.6)
    hi = cc.sort_comparisons(100, 2.0)
    assert lo < mid < hi
    with pytest.raises(ModelDomainError):
        cc.sort_comparisons(5, 9)


def test_mixed_table_build_cost_edges():
    # no capacity left for raw records: only the preload walk remains
    u, H = 50.0, 64.0
    only = cc.mixed_table_build_cost(1000, 200, cap=u, H=H, U=5000.0, u=u)
    assert only == pytest.approx(cc.unique_preload_cost(u, H))
    # with no preload the mixed form tracks the plain streaming build
    U = cc.solve_universe(1000, 200)
    plain = cc.table_build_cost(cc.expected_records(120, 1000, 200),
                                1000, 200, cap=120.0, H=H, U=U)
    mixed = cc.mixed_table_build_cost(1000, 200, cap=120.0, H=H, U=U, u=0.0)
    assert mixed == pytest.approx(plain, rel=0.02)
    # preloading residents makes every raw insertion more expensive
    assert cc.mixed_table_build_cost(1000, 200, 120.0, H, U, 40.0) > mixed


def test_solve_universe_roundtrip():
    for u_true in (150.0, 2000.0, 77.0):
        n = 500
        m = u_true * (1 - (1 - 1 / u_true) ** n)
        u = cc.solve_universe(n, m)
        assert u == pytest.approx(u_true, rel=1e-4)


def test_solve_universe_saturated():
    assert math.isinf(cc.solve_universe(100, 100))


def test_occupied_slots_monte_carlo():
    rng = np.random.default_rng(3)
    H, k = 128, 90
    trials = 600
    occ = 0
    for _ in range(trials):
        slots = rng.integers(0, H, size=k)
        occ += len(np.unique(slots))
    assert cc.occupied_slots(H, k) == pytest.approx(occ / trials, rel=0.02)


def test_unique_preload_cost_brute():
    # inserting u distinct keys: the i-th walks an expected (i-1)/H chain
    u, H = 40, 16
    brute = sum((i - 1) / H for i in range(1, u + 1))
    assert cc.unique_preload_cost(u, H) == pytest.approx(brute)


def test_chain_insert_cost_zero_table():
    assert cc.chain_insert_cost(np.zeros(5), 64, 1000.0) == pytest.approx(0.0)


def test_merge_plan_single_wide_round():
    assert plan_merge_rounds(3, 7) == [[0, 1, 2]]


def test_merge_plan_trimming_round_first():
    # five runs at fan-in three: trim 3 first, final merge is exactly 3 wide
    assert plan_merge_rounds(5, 3) == [[0, 1, 2], [3, 4, 5]]


def test_merge_plan_full_rounds_fifo():
    rounds = plan_merge_rounds(20, 3)
    # every intermediate round at most fan-in wide; last exactly <= fan-in
    assert all(len(r) <= 3 for r in rounds)
    # all original runs consumed exactly once across rounds
    flat = [i for r in rounds for i in r]
    assert sorted(x for x in flat if x < 20) == list(range(20))
    # intermediate outputs are each consumed exactly once too
    outs = list(range(20, 20 + len(rounds) - 1))
    assert sorted(x for x in flat if x >= 20) == outs


def test_merge_cost_trace_frozen():
    # five unit runs at fan-in 3: first round sees 3 records, final sees 5
    runs = [(1.0, 1.0, 1.0)] * 5
    out = cc.merge_cost(runs, 3, rec_per_frame=1.0)
    assert out["trace"] == [3.0, 5.0]
    assert out["comparisons"] == pytest.approx(8 * math.log2(3))


def test_merge_cost_hand_sim():
    # 4 runs of sizes 10,20,30,40 at fan-in 2, no shrink:
    # rounds: [10,20]->30w, [30,40]->70w, [30,70] final
    runs = [(10.0, 1.0, 10.0), (20.0, 2.0, 20.0),
            (30.0, 3.0, 30.0), (40.0, 4.0, 40.0)]
    out = cc.merge_cost(runs, 2, rec_per_frame=10.0)
    assert out["trace"] == [30.0, 70.0, 100.0]
    assert out["frames_written"] == 3 + 7
    assert out["frames_read"] == (1 + 2) + (3 + 4) + (3 + 7)
    assert out["comparisons"] == pytest.approx(200.0)  # 30+70+100 at log2(2)


def test_merge_cost_shrink_applies():
    runs = [(100.0, 10.0, 100.0)] * 4
    shrink = lambda raw: raw / 2
    out = cc.merge_cost(runs, 2, rec_per_frame=10.0, shrink=shrink)
    # first round merges 100+100 raw=200 -> 100 records out
    assert out["trace"][0] == 200.0
    assert out["trace"][1] == 200.0  # 100+100 raw=200 -> 100
    assert out["trace"][2] == 200.0  # 100+100 shrunk outputs


def test_plan_partitions_fit():
    assert cc.plan_partitions(10.0, 16) == 0
    assert cc.plan_partitions(16.0, 16) == 0


def test_plan_partitions_formula():
    # needs ceil((40-16)/14) = 2 spill partitions
    assert cc.plan_partitions(40.0, 16) == 2


def test_plan_partitions_clamped():
    assert cc.plan_partitions(1e9, 16) == 14


def test_bloom_skip_fraction_monte_carlo():
    rng = np.random.default_rng(19)
    H, k, probes = 256, 256, 4000
    trials = 30
    passed = 0
    for _ in range(trials):
        filt = np.zeros(H, np.uint16)
        slots = rng.integers(0, H, size=k)
        b1 = rng.integers(0, 8, size=k)
        b2 = rng.integers(0, 8, size=k)
        np.bitwise_or.at(filt, slots, (1 << b1) | (1 << b2))
        ps = rng.integers(0, H, size=probes)
        pb1 = rng.integers(0, 8, size=probes)
        pb2 = rng.integers(0, 8, size=probes)
        mask = (1 << pb1) | (1 << pb2)
        passed += int(((filt[ps] & mask) == mask).sum())
    mc = passed / (trials * probes)
    # The closed form is mean-field: per-slot load variance pushes the
    # measured pass rate slightly above it, so check the one-sided band
    # the validation suite relies on instead of tight symmetric error.
    est = cc.bloom_skip_fraction(k, H)
    assert est <= mc * 1.05
    assert mc <= 2.0 * est
    assert est == pytest.approx(mc, rel=0.15)
