"""Per-operator CPU and I/O predictions from the closed-form components.

Each ``model_*`` function mirrors its operator's planning — the same
partition counts, table capacities, grace levels, recursion and fallback
rules — but replaces execution with expectation formulas over a uniform
key distribution and trusted input statistics. Reports follow the same
conventions as ``Metrics``: ``frames_read`` / ``frames_written`` cover
run-file traffic only (the top-level input scan and the final output
stream are excluded from the comparable counters and carried separately),
and ``comparisons`` counts ordering plus hash-chain comparisons.

The module also exposes the component math under its conventional short
names (``I_key``, ``I_raw``, ``C_sort``, ``C_hash``, ``merge_cost``,
``solve_generator_U``) with argument validation, for use by the benchmark
harness and tests.

Everything here is pure float math: deterministic, allocation-free apart
from numpy scratch vectors, and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from aggbench.core import (
    DatasetStats,
    FIELD_SIZE,
    KLEN_SIZE,
    LINK_SIZE,
    ModelDomainError,
    SLOT_SIZE,
)
from aggbench.cost_components import (
    bloom_skip_fraction,
    expected_groups,
    expected_groups_vec,
    expected_records,
    merge_cost as _merge_rounds,
    mixed_table_build_cost,
    occupied_slots,
    quicksort_comparisons,
    solve_universe,
    sort_comparisons,
    table_build_cost,
)
from aggbench.hash_table import BLOOM_BYTE, plan_table
from aggbench.operators.hybrid import (
    FALLBACK_HASH_SORT,
    dd_spill_trajectory,
    fallback_controller,
    fudge_factor,
    plan_dd_layout,
    plan_hybrid,
    sort_merge_levels,
)
from aggbench.run_store import plan_merge_rounds

__all__ = [
    "CostParameters",
    "CostReport",
    "InputModel",
    "C_hash",
    "C_hash_mixed",
    "C_sort",
    "I_key",
    "I_raw",
    "MODELS",
    "merge_cost",
    "model_dynamic_destaging",
    "model_for",
    "model_hash_sort",
    "model_original_hh",
    "model_pre_partitioning",
    "model_shared_hash",
    "model_sort_based",
    "solve_generator_U",
]


# ---------------------------------------------------------------------------
# Component operations (validated wrappers)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InputModel:
    """A record population: n records, m distinct keys, and the size U of
    the with-replacement generator key set that would produce m distinct
    keys in n draws (infinite when every record is unique)."""

    n: float
    m: float
    U: float

    def __post_init__(self):
        if self.m > self.n + 1e-9 * max(1.0, self.n):
            raise ModelDomainError(f"need m <= n, got n={self.n}, m={self.m}")
        if not math.isinf(self.U) and self.U < self.m - 1e-9:
            raise ModelDomainError(f"need U >= m, got U={self.U}, m={self.m}")

    @classmethod
    def from_counts(cls, n: float, m: float) -> "InputModel":
        return cls(n, m, solve_generator_U(n, m))


def I_key(r: float, n: float, m: float) -> float:
    """Expected distinct keys among r records drawn without replacement
    from a population of n records holding m distinct keys."""
    if not 0.0 <= r <= n * (1.0 + 1e-12):
        raise ModelDomainError(f"need 0 <= r <= n, got r={r}, n={n}")
    if m > n + 1e-9 * max(1.0, n):
        raise ModelDomainError(f"need m <= n, got n={n}, m={m}")
    return expected_groups(r, n, m)


def I_raw(k: float, n: float, m: float) -> float:
    """Expected records consumed from an n/m population by the time k
    distinct keys have been seen."""
    if not 0.0 <= k <= m * (1.0 + 1e-12):
        raise ModelDomainError(f"need 0 <= k <= m, got k={k}, m={m}")
    if m > n + 1e-9 * max(1.0, n):
        raise ModelDomainError(f"need m <= n, got n={n}, m={m}")
    return expected_records(k, n, m)


def C_sort(n: float, m: float) -> float:
    """Expected three-way quicksort comparisons for n records holding m
    distinct keys (duplicates collapse into pivot blocks)."""
    return sort_comparisons(n, m)


def solve_generator_U(n: float, m: float) -> float:
    """Size of the with-replacement key universe that yields m distinct
    keys in n draws, in expectation. Returns ``inf`` when m equals n
    (all-unique draws need an unbounded universe); callers treat the
    hash-hit probability k/U as zero in that limit."""
    if m > n + 1e-9 * max(1.0, n):
        raise ModelDomainError(f"need m <= n, got n={n}, m={m}")
    if m < 1 or n < 1:
        raise ModelDomainError(f"need n, m >= 1, got n={n}, m={m}")
    return solve_universe(n, m)


def C_hash(n: float, m: float, K: float, H: float,
           U: float | None = None) -> float:
    """Expected chain comparisons to stream records from an n/m population
    into an empty chained table until it holds K distinct groups (or the
    input runs out, whichever is first)."""
    if min(n, m, K, H) < 0:
        raise ModelDomainError("hash cost arguments must be nonnegative")
    if n <= 0 or m <= 0:
        return 0.0
    if U is None:
        U = solve_generator_U(n, m)
    n_ins = expected_records(min(K, m), n, m)
    return table_build_cost(n_ins, n, m, K, H, U)


def C_hash_mixed(n: float, m: float, K: float, H: float, u: float,
                 U: float | None = None) -> float:
    """Like ``C_hash`` but with u known-distinct groups preloaded before
    the raw records arrive; the preload pays only chain-walk misses and
    every later insertion sees u extra residents."""
    if min(n, m, K, H, u) < 0:
        raise ModelDomainError("hash cost arguments must be nonnegative")
    if u > K * (1.0 + 1e-12):
        raise ModelDomainError(f"need u <= K, got u={u}, K={K}")
    if U is None:
        U = solve_generator_U(max(n, 1.0), min(m, max(n, 1.0)))
    return mixed_table_build_cost(n, m, K, H, U, u)


def merge_cost(sizes, fan_in: int, kind: str = "io",
               trace: list | None = None) -> float:
    """Accumulated cost of merging runs of the given sizes at fan_in.

    Rounds follow the run-merge schedule (full-width FIFO merges, one
    trimming round, then a final merge of exactly fan_in inputs). Per
    round, ``kind="io"`` adds the summed input sizes and ``"comparisons"``
    adds size * log2(width). The merged run re-enters the queue at its
    summed size. ``trace``, when given, receives one per-round cost.
    """
    if kind not in ("io", "comparisons"):
        raise ModelDomainError(f"unknown merge cost kind: {kind!r}")
    pool = [float(s) for s in sizes]
    if not pool:
        return 0.0
    total = 0.0
    for round_inputs in plan_merge_rounds(len(pool), fan_in):
        ins = [pool[i] for i in round_inputs]
        size = sum(ins)
        cost = size if kind == "io" else (
            size * math.log2(len(ins)) if len(ins) > 1 else 0.0)
        total += cost
        if trace is not None:
            trace.append(cost)
        pool.append(size)
    return total


# ---------------------------------------------------------------------------
# Report plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostParameters:
    """Sizing knobs shared by all models.

    b is the stored record width in bytes (key plus aggregate state; group
    records and spilled records share the wire format, so one width serves
    both), p the frame size, M the frame budget. ``o`` is the per-group
    table blow-up (link word plus slot_ratio slot entries over b) and
    ``F = o * f`` the planning fudge factor.
    """

    b: float
    p: float
    M: int
    slot_ratio: float = 1.0
    f: float = 1.2
    bloom_alpha: float | None = None  # override the filter miss-rate model

    def __post_init__(self):
        if self.b <= 0 or self.p <= 0:
            raise ModelDomainError("record and frame bytes must be positive")
        if self.M < 2:
            raise ModelDomainError(f"need M >= 2 frames, got {self.M}")
        if self.f < 1.0:
            raise ModelDomainError(f"need slack factor >= 1, got {self.f}")

    @property
    def o(self) -> float:
        per = self.b + LINK_SIZE + self.slot_ratio * SLOT_SIZE
        return per / self.b

    @property
    def F(self) -> float:
        return self.o * self.f

    @classmethod
    def from_config(cls, stats: DatasetStats, cfg,
                    state_width: int = 1) -> "CostParameters":
        """Match the operators' planning inputs for a given run setup."""
        floor = KLEN_SIZE + 1 + FIELD_SIZE * state_width
        if stats.G_t > 0 and stats.G > 0:
            b = max(stats.G * cfg.frame_size / stats.G_t, float(floor))
        else:
            b = float(KLEN_SIZE + 16 + FIELD_SIZE * state_width)
        return cls(b=b, p=float(cfg.frame_size), M=cfg.memory_frames,
                   slot_ratio=cfg.slot_ratio, f=cfg.fudge)

    def frames(self, records: float) -> float:
        return records * self.b / self.p


@dataclass
class CostReport:
    """Predicted counters for one operator run, plus a per-phase breakdown.

    comparisons / frames_read / frames_written are comparable to the same
    fields of ``Metrics``. input_frames and output_frames carry the
    excluded top-level scan and final result stream so total I/O can be
    reconstructed. All values are expectations over uniformly distributed
    keys and are kept real-valued; round only at the edge.
    """

    algo: str
    comparisons: float = 0.0
    frames_read: float = 0.0
    frames_written: float = 0.0
    output_groups: float = 0.0
    input_frames: float = 0.0
    output_frames: float = 0.0
    breakdown: dict = field(default_factory=dict)
    assumptions: str = "uniform keys; trusted input statistics"

    @property
    def io_frames(self) -> float:
        return self.frames_read + self.frames_written

    def rounded(self) -> dict:
        """Integer counters under the measured-metrics names."""
        return {
            "comparisons": round(self.comparisons),
            "frames_read": round(self.frames_read),
            "frames_written": round(self.frames_written),
            "frames_read_total": round(self.frames_read
                                       + self.input_frames),
            "frames_written_total": round(self.frames_written
                                          + self.output_frames),
            "output_groups": round(self.output_groups),
        }


class _Acc:
    """Builds a CostReport: phase-tagged adds plus child-report rollups."""

    def __init__(self, algo: str):
        self.algo = algo
        self.cmp_total = 0.0
        self.read_total = 0.0
        self.write_total = 0.0
        self.groups = 0.0
        self.bd: dict = {}

    def _add(self, key: str, v: float) -> None:
        if v:
            self.bd[key] = self.bd.get(key, 0.0) + v

    def cmp(self, phase: str, v: float) -> None:
        v = max(0.0, v)
        self.cmp_total += v
        self._add(f"cmp.{phase}", v)

    def read(self, phase: str, v: float) -> None:
        v = max(0.0, v)
        self.read_total += v
        self._add(f"read.{phase}", v)

    def write(self, phase: str, v: float) -> None:
        v = max(0.0, v)
        self.write_total += v
        self._add(f"write.{phase}", v)

    def note(self, key: str, v: float) -> None:
        self.bd[key] = v

    def absorb(self, rep: CostReport, times: float = 1.0) -> None:
        self.cmp_total += times * rep.comparisons
        self.read_total += times * rep.frames_read
        self.write_total += times * rep.frames_written
        self.groups += times * rep.output_groups
        self._add("cmp.recurse", times * rep.comparisons)
        self._add("read.recurse", times * rep.frames_read)
        self._add("write.recurse", times * rep.frames_written)

    def report(self, stats: DatasetStats, pm: CostParameters,
               top: bool) -> CostReport:
        rep = CostReport(
            algo=self.algo,
            comparisons=self.cmp_total,
            frames_read=self.read_total,
            frames_written=self.write_total,
            output_groups=self.groups,
            breakdown=self.bd,
        )
        if top:
            rep.input_frames = stats.R
            rep.output_frames = pm.frames(self.groups)
        return rep


# ---------------------------------------------------------------------------
# Recursion scaffolding shared by the models
# ---------------------------------------------------------------------------


def _physical_table(n_frames: int, pm: CostParameters,
                    bloom: bool = False) -> tuple[float, float]:
    """Group capacity and slot count of a planned table as actually laid
    out: the slot array rounds up to whole frames and whole link-prefixed
    entries pack into the storage frames that remain."""
    _, H = plan_table(n_frames, int(pm.p), pm.b, pm.slot_ratio, bloom=bloom)
    slot_bytes = (SLOT_SIZE + (BLOOM_BYTE if bloom else 0)) * H
    storage = n_frames - math.ceil(slot_bytes / pm.p)
    per_frame = math.floor(pm.p / (LINK_SIZE + pm.b))
    return float(max(storage, 0) * per_frame), float(H)


def _chain_walks(k: np.ndarray, m: float, H: float) -> float:
    """Total chain comparisons for records arriving at a table that holds
    ``k[i]`` groups out of a live population of ``m`` keys.

    A record's key is uniform over the m keys, so it finds its group
    resident with probability k/m and walks to its own entry — uniform
    position in a chain it shares with (k-1)/H expected others — while a
    miss walks a full average chain of k/H entries.
    """
    if k.size == 0 or H <= 0 or m <= 0:
        return 0.0
    hit = np.minimum(k / m, 1.0)
    c_hit = 1.0 + np.maximum(k - 1.0, 0.0) / (2.0 * H)
    c_miss = k / H
    return float(np.sum(hit * c_hit + (1.0 - hit) * c_miss))


def _build(n_records: float, n: float, m: float, cap: float, H: float,
           u: float = 0.0) -> float:
    """Chain comparisons for one table build, mixed-aware.

    ``u`` already-collapsed groups preload the table first (each walking
    the chain of its unique predecessors), then ``n_records`` records out
    of a stream of ``n`` over the full ``m``-key population — ``u`` of
    which are the preloaded keys — stream in behind them.
    """
    cost = u * max(u - 1.0, 0.0) / (2.0 * H) if H > 0 else 0.0
    n_ins = int(min(n_records, n))
    if n_ins <= 0 or m <= 0:
        return cost
    seen = np.arange(n_ins, dtype=np.float64)  # records already inserted
    touched = expected_groups_vec(seen, max(n, float(n_ins)), m)
    if u > 0:
        # only keys outside the preloaded set add new entries
        k = u + touched * (max(m - u, 0.0) / m)
    else:
        k = touched
    return cost + _chain_walks(np.minimum(k, cap), m, H)


def _child_stats(records: float, groups: float, frames: float,
                 pm: CostParameters) -> DatasetStats:
    groups = min(groups, records)
    return DatasetStats(R=frames, R_t=records,
                        G=groups * pm.b / pm.p, G_t=groups)


def _recurse(acc: _Acc, algo: str, pm: CostParameters, parent_R: float,
             level: int, sort_levels: int, records: float, groups: float,
             frames: float, u_pre: float, times: float = 1.0) -> None:
    """Model one spilled run's re-read and child pass, ``times`` over.

    Mirrors the operators' run draining: the child re-reads the run
    (counted as frames_read), then either the same algorithm recurses one
    level deeper or an oversized run falls back to hash-sort.
    """
    if records <= 0 or times <= 0:
        return
    acc.read("recurse", times * frames)
    decision = fallback_controller(frames, parent_R, level + 1, sort_levels)
    cstats = _child_stats(records, groups, frames, pm)
    if decision == FALLBACK_HASH_SORT:
        rep = _level_hash_sort(cstats, pm, level + 1, sort_levels)
    else:
        rep = _LEVEL[algo](cstats, pm, level + 1, sort_levels, u_pre)
    acc.absorb(rep, times)


def _grace_level(acc: _Acc, algo: str, stats: DatasetStats,
                 pm: CostParameters, level: int, sort_levels: int,
                 u_pre: float) -> CostReport:
    """One pure-partitioning level: flush everything, recurse per bucket."""
    fan = pm.M - 1
    acc.write("grace", stats.R)
    acc.cmp("grace_scan", stats.R_t)
    _recurse(acc, algo, pm, stats.R, level, sort_levels,
             records=stats.R_t / fan, groups=stats.G_t / fan,
             frames=stats.R / fan, u_pre=u_pre / fan, times=fan)
    return acc.report(stats, pm, top=level == 0)


# ---------------------------------------------------------------------------
# Sort-based
# ---------------------------------------------------------------------------


def _level_sort_based(stats: DatasetStats, pm: CostParameters, level: int,
                      sort_levels: int, u_pre: float = 0.0) -> CostReport:
    acc = _Acc("sort_based")
    R_t, G_t = stats.R_t, stats.G_t
    if R_t <= 0:
        return acc.report(stats, pm, top=level == 0)
    acc.groups = G_t
    # loads fill M-1 frames (one frame stays reserved for cutting runs)
    r_mem = (pm.M - 1) * pm.p / pm.b
    if R_t <= r_mem:
        acc.cmp("sort", quicksort_comparisons(R_t, G_t))
        return acc.report(stats, pm, top=level == 0)
    n_full = int(R_t // r_mem)
    chunks = [r_mem] * n_full
    rem = R_t - n_full * r_mem
    if rem > 0.5:
        chunks.append(rem)
    runs = []
    c_full = None
    for chunk in chunks:
        m_chunk = min(expected_groups(chunk, R_t, G_t), chunk)
        if chunk == r_mem and c_full is not None:
            acc.cmp("sort", c_full)
        else:
            c = quicksort_comparisons(chunk, m_chunk)
            if chunk == r_mem:
                c_full = c
            acc.cmp("sort", c)
        runs.append((chunk, math.ceil(pm.frames(chunk)), chunk))
    acc.write("runs", sum(r[1] for r in runs))
    merged = _merge_rounds(runs, fan_in=pm.M - 1, rec_per_frame=pm.p / pm.b)
    acc.cmp("merge", merged["comparisons"])
    acc.read("merge", merged["frames_read"])
    acc.write("merge", merged["frames_written"])
    return acc.report(stats, pm, top=level == 0)


def model_sort_based(stats: DatasetStats, params: CostParameters) -> CostReport:
    """Predicted cost of quicksorted memory loads plus a folding merge."""
    return _level_sort_based(stats, params, 0,
                             sort_merge_levels(stats.R, params.M))


# ---------------------------------------------------------------------------
# Hash-sort
# ---------------------------------------------------------------------------


def _level_hash_sort(stats: DatasetStats, pm: CostParameters, level: int,
                     sort_levels: int, u_pre: float = 0.0) -> CostReport:
    acc = _Acc("hash_sort")
    R_t, G_t = stats.R_t, stats.G_t
    if R_t <= 0:
        return acc.report(stats, pm, top=level == 0)
    acc.groups = G_t
    K, H = plan_table(pm.M - 1, int(pm.p), pm.b, pm.slot_ratio)
    if K >= G_t:
        # one resident table, no runs, unsorted emit
        acc.cmp("build", _build(R_t, R_t, G_t, K, H))
        return acc.report(stats, pm, top=level == 0)
    R_H = expected_records(K, R_t, G_t)
    n_full = int(R_t // R_H)
    rem = R_t - n_full * R_H
    c_fill = _build(R_H, R_t, G_t, K, H)
    Hu = occupied_slots(H, K)
    c_sort = Hu * quicksort_comparisons(K / Hu, K / Hu) if Hu > 0 else 0.0
    acc.cmp("build", n_full * c_fill)
    acc.cmp("slot_sort", n_full * c_sort)
    runs = [(float(K), math.ceil(pm.frames(K)), R_H)] * n_full
    if rem > 0.5:
        k_rem = min(expected_groups(rem, R_t, G_t), float(K))
        acc.cmp("build", _build(rem, R_t, G_t, K, H))
        Hu_r = occupied_slots(H, k_rem)
        if Hu_r > 0:
            acc.cmp("slot_sort",
                    Hu_r * quicksort_comparisons(k_rem / Hu_r, k_rem / Hu_r))
        runs.append((k_rem, math.ceil(pm.frames(k_rem)), rem))
    acc.write("runs", sum(r[1] for r in runs))
    merged = _merge_rounds(runs, fan_in=pm.M - 1, rec_per_frame=pm.p / pm.b,
                           shrink=lambda raw: expected_groups(raw, R_t, G_t))
    acc.cmp("merge", merged["comparisons"])
    acc.read("merge", merged["frames_read"])
    acc.write("merge", merged["frames_written"])
    return acc.report(stats, pm, top=level == 0)


def model_hash_sort(stats: DatasetStats, params: CostParameters) -> CostReport:
    """Predicted cost of fold-first tables cut to slot-sorted runs, then a
    folding merge."""
    return _level_hash_sort(stats, params, 0,
                            sort_merge_levels(stats.R, params.M))


# ---------------------------------------------------------------------------
# Hybrid-hash family
# ---------------------------------------------------------------------------


def _fits_in_memory(acc: _Acc, stats: DatasetStats, pm: CostParameters,
                    n_frames: int, u_pre: float) -> None:
    """No-spill hybrid level: one table over n_frames holds everything."""
    K, H = _physical_table(n_frames, pm)
    raw = max(0.0, stats.R_t - u_pre)
    acc.cmp("build", _build(raw, raw if u_pre else stats.R_t, stats.G_t,
                            K, H, u=u_pre))
    acc.groups += stats.G_t


def _level_original_hh(stats: DatasetStats, pm: CostParameters, level: int,
                       sort_levels: int, u_pre: float = 0.0) -> CostReport:
    acc = _Acc("original_hh")
    if stats.R_t <= 0:
        return acc.report(stats, pm, top=level == 0)
    F = fudge_factor(pm.b, pm.f, pm.slot_ratio)
    plan = plan_hybrid(stats, pm.M, F)
    if plan.grace_levels:
        return _grace_level(acc, "original_hh", stats, pm, level,
                            sort_levels, u_pre)
    R_t, G_t = stats.R_t, stats.G_t
    if plan.P == 0:
        _fits_in_memory(acc, stats, pm, pm.M - 1, u_pre)
        return acc.report(stats, pm, top=level == 0)
    P = plan.P
    K, H = _physical_table(pm.M - P, pm)
    # the hash split sends r_res of the keys to the resident partition
    m0 = plan.r_res * G_t
    n0 = plan.r_res * R_t
    if K >= m0:
        acc.cmp("build", _build(n0, n0, m0, K, H))
        acc.groups += m0
    else:
        # the plan overshot: the resident table fills mid-stream, is cut
        # to a run of its own, and the rest of partition 0 routes raw
        r0 = expected_records(K, n0, m0)
        acc.cmp("build", _build(r0, n0, m0, K, H))
        raw0 = max(0.0, n0 - r0)
        acc.write("overflow", pm.frames(K + raw0))
        _recurse(acc, "original_hh", pm, stats.R, level, sort_levels,
                 records=K + raw0, groups=m0,
                 frames=pm.frames(K + raw0), u_pre=K, times=1.0)
    spilled = R_t - n0
    acc.write("spill", pm.frames(spilled))
    _recurse(acc, "original_hh", pm, stats.R, level, sort_levels,
             records=spilled / P, groups=(G_t - m0) / P,
             frames=pm.frames(spilled) / P, u_pre=0.0, times=P)
    return acc.report(stats, pm, top=level == 0)


def model_original_hh(stats: DatasetStats,
                      params: CostParameters) -> CostReport:
    """Predicted cost of a resident partition-0 table with P raw-spilling
    partitions, recursing on the spilled runs."""
    return _level_original_hh(stats, params, 0,
                              sort_merge_levels(stats.R, params.M))


def _level_shared_hash(stats: DatasetStats, pm: CostParameters, level: int,
                       sort_levels: int, u_pre: float = 0.0) -> CostReport:
    acc = _Acc("shared_hash")
    if stats.R_t <= 0:
        return acc.report(stats, pm, top=level == 0)
    F = fudge_factor(pm.b, pm.f, pm.slot_ratio)
    plan = plan_hybrid(stats, pm.M, F)
    if plan.grace_levels:
        return _grace_level(acc, "shared_hash", stats, pm, level,
                            sort_levels, u_pre)
    R_t, G_t = stats.R_t, stats.G_t
    if plan.P == 0:
        _fits_in_memory(acc, stats, pm, pm.M - 1, u_pre)
        return acc.report(stats, pm, top=level == 0)
    K1, H1 = plan_table(pm.M - 1, int(pm.p), pm.b, pm.slot_ratio)
    overhead1 = math.ceil(SLOT_SIZE * H1 / pm.p)
    P = min(plan.P, pm.M - 2 - overhead1)
    if P < 1:
        raise ModelDomainError(
            f"no room for a shared frame: M={pm.M}, slot overhead "
            f"{overhead1}, P={plan.P}")
    r_res = (pm.M - P) / ((pm.M - P) + pm.M * P)
    r_spill = (1.0 - r_res) / P
    if K1 >= G_t:
        # shared table never fills: no relocation, no spill
        raw = max(0.0, R_t - u_pre)
        acc.cmp("before_full", _build(raw, raw if u_pre else R_t, G_t,
                                      K1, H1, u=u_pre))
        acc.groups += G_t
        return acc.report(stats, pm, top=level == 0)
    # everyone shares the table until it fills
    R_H = expected_records(float(K1), R_t, G_t)
    acc.cmp("before_full", _build(R_H, R_t, G_t, K1, H1))
    # relocation: partition-0's collapsed groups re-hash into a fresh
    # table and its share of the remaining stream builds on top of them;
    # the other partitions route straight to their spill buffers
    u0 = r_res * K1
    K2, H2 = plan_table(pm.M - P, int(pm.p), pm.b, pm.slot_ratio)
    n_after = max(0.0, r_res * (R_t - R_H))
    m_after = max(0.0, r_res * G_t - u0)
    acc.cmp("after_full", _build(n_after, n_after, u0 + m_after, K2, H2,
                                 u=u0))
    acc.groups += r_res * G_t
    # each spilled partition carries its collapsed share plus raw records
    u_sp = r_spill * K1
    raw_sp = max(0.0, r_spill * (R_t - R_H))
    acc.write("spill", P * pm.frames(u_sp + raw_sp))
    _recurse(acc, "shared_hash", pm, stats.R, level, sort_levels,
             records=u_sp + raw_sp, groups=r_spill * G_t,
             frames=pm.frames(u_sp + raw_sp), u_pre=u_sp, times=P)
    return acc.report(stats, pm, top=level == 0)


def model_shared_hash(stats: DatasetStats,
                      params: CostParameters) -> CostReport:
    """Predicted cost of one shared table that splits into the resident
    partition plus collapsed-then-raw spill runs on its first fill."""
    return _level_shared_hash(stats, params, 0,
                              sort_merge_levels(stats.R, params.M))


def _level_dynamic_destaging(stats: DatasetStats, pm: CostParameters,
                             level: int, sort_levels: int,
                             u_pre: float = 0.0) -> CostReport:
    acc = _Acc("dynamic_destaging")
    if stats.R_t <= 0:
        return acc.report(stats, pm, top=level == 0)
    F = fudge_factor(pm.b, pm.f, pm.slot_ratio)
    plan = plan_hybrid(stats, pm.M, F)
    if plan.grace_levels:
        return _grace_level(acc, "dynamic_destaging", stats, pm, level,
                            sort_levels, u_pre)
    R_t, G_t = stats.R_t, stats.G_t
    nparts, H_per, overhead, _, _ = plan_dd_layout(
        pm.M, int(pm.p), pm.b, pm.slot_ratio, plan.P)
    traj = dd_spill_trajectory(G_t, pm.M, nparts, overhead,
                               pm.p / (LINK_SIZE + pm.b))
    P_s = len(traj)
    acc.note("dd.nparts", float(nparts))
    acc.note("dd.P_s", float(P_s))
    n_i = R_t / nparts
    m_i = G_t / nparts
    u_i = u_pre / nparts
    if P_s == 0:
        raw_i = max(0.0, n_i - u_i)
        acc.cmp("build", nparts * _build(raw_i, raw_i if u_pre else n_i,
                                         m_i, m_i, H_per, u=u_i))
        acc.groups += G_t
        return acc.report(stats, pm, top=level == 0)
    spill_runs = []  # (collapsed, raw, frames)
    for K_i in traj:
        K_i = min(K_i, m_i)
        R_H_i = expected_records(K_i, n_i, m_i)
        acc.cmp("spilled_build", _build(R_H_i, n_i, m_i, K_i, H_per))
        raw_i = max(0.0, n_i - R_H_i)
        frames_i = pm.frames(K_i + raw_i)
        acc.write("spill", frames_i)
        spill_runs.append((K_i, raw_i, frames_i))
    survivors = nparts - P_s
    if survivors > 0:
        acc.cmp("resident_build",
                survivors * _build(n_i, n_i, m_i, m_i, H_per))
        acc.groups += survivors * m_i
    # partition tuning: batch consecutive spilled runs that fit one pass
    batches = []
    batch = [0.0, 0.0, 0.0, 0.0]  # collapsed, raw, frames, group estimate
    for K_i, raw_i, frames_i in spill_runs:
        gest = min(m_i, K_i + raw_i)
        if batch[3] and (batch[3] + gest) * pm.b / pm.p * F > pm.M:
            batches.append(batch)
            batch = [0.0, 0.0, 0.0, 0.0]
        batch[0] += K_i
        batch[1] += raw_i
        batch[2] += frames_i
        batch[3] += gest
    if batch[3]:
        batches.append(batch)
    for u_b, raw_b, frames_b, gest_b in batches:
        _recurse(acc, "dynamic_destaging", pm, stats.R, level, sort_levels,
                 records=u_b + raw_b, groups=gest_b, frames=frames_b,
                 u_pre=u_b)
    return acc.report(stats, pm, top=level == 0)


def model_dynamic_destaging(stats: DatasetStats,
                            params: CostParameters) -> CostReport:
    """Predicted cost of per-partition resident tables with
    largest-partition eviction, then batched re-aggregation of the
    spilled runs."""
    return _level_dynamic_destaging(stats, params, 0,
                                    sort_merge_levels(stats.R, params.M))


def _level_pre_partitioning(stats: DatasetStats, pm: CostParameters,
                            level: int, sort_levels: int,
                            u_pre: float = 0.0) -> CostReport:
    acc = _Acc("pre_partitioning")
    if stats.R_t <= 0:
        return acc.report(stats, pm, top=level == 0)
    F = fudge_factor(pm.b, pm.f, pm.slot_ratio, bloom=True)
    plan = plan_hybrid(stats, pm.M, F)
    if plan.grace_levels:
        return _grace_level(acc, "pre_partitioning", stats, pm, level,
                            sort_levels, u_pre)
    R_t, G_t = stats.R_t, stats.G_t
    if plan.P == 0:
        _fits_in_memory(acc, stats, pm, pm.M - 1, u_pre)
        return acc.report(stats, pm, top=level == 0)
    P = plan.P
    bloom = P > 1
    K, H = plan_table(pm.M - P, int(pm.p), pm.b, pm.slot_ratio, bloom=bloom)
    if float(K) >= G_t:
        # the table never freezes: everything aggregates in place
        raw = max(0.0, R_t - u_pre)
        acc.cmp("fill", _build(raw, raw if u_pre else R_t, G_t, K, H,
                               u=u_pre))
        acc.groups += G_t
        return acc.report(stats, pm, top=level == 0)
    # the table fills to physical capacity and freezes; the first K
    # distinct keys stay resident no matter which partition they hash to
    k_res = float(K)
    r_fill = expected_records(k_res, R_t, G_t)
    acc.cmp("fill", _build(r_fill, R_t, G_t, K, H))
    acc.groups += k_res
    post = max(0.0, R_t - r_fill)
    hits = post * (k_res / G_t) if G_t > 0 else 0.0
    c_hit = 1.0 + max(k_res - 1.0, 0.0) / (2.0 * H) if H > 0 else 0.0
    acc.cmp("probe_hit", hits * c_hit)
    spilled = post - hits
    if pm.bloom_alpha is not None:
        alpha = pm.bloom_alpha
    elif bloom:
        alpha = bloom_skip_fraction(k_res, H)
    else:
        alpha = 1.0
    acc.note("pp.alpha", alpha)
    acc.cmp("probe_miss", alpha * spilled * (k_res / H if H > 0 else 0.0))
    acc.write("spill", pm.frames(spilled))
    _recurse(acc, "pre_partitioning", pm, stats.R, level, sort_levels,
             records=spilled / P, groups=(G_t - k_res) / P,
             frames=pm.frames(spilled) / P, u_pre=0.0, times=P)
    return acc.report(stats, pm, top=level == 0)


def model_pre_partitioning(stats: DatasetStats,
                           params: CostParameters) -> CostReport:
    """Predicted cost of fill-freeze-probe: resident groups absorb hits in
    place, misses pass a per-slot filter before spilling raw."""
    return _level_pre_partitioning(stats, params, 0,
                                   sort_merge_levels(stats.R, params.M))


_LEVEL = {
    "sort_based": _level_sort_based,
    "hash_sort": _level_hash_sort,
    "original_hh": _level_original_hh,
    "shared_hash": _level_shared_hash,
    "dynamic_destaging": _level_dynamic_destaging,
    "pre_partitioning": _level_pre_partitioning,
}

MODELS = {
    "sort_based": model_sort_based,
    "hash_sort": model_hash_sort,
    "original_hh": model_original_hh,
    "shared_hash": model_shared_hash,
    "dynamic_destaging": model_dynamic_destaging,
    "pre_partitioning": model_pre_partitioning,
}


def model_for(algo_id: str):
    """The prediction function registered for an operator id."""
    try:
        return MODELS[algo_id]
    except KeyError:
        raise ModelDomainError(f"no cost model for {algo_id!r}") from None
