"""Spill-capable hybrid-hash operators sharing one planning core.

Planning compares the expected table footprint G·F against the budget M
(all in frames; F folds per-group table overhead and slack into the
group bytes). A footprint at or beyond M² cannot be split in one pass,
so the input first goes through L levels of pure hash partitioning with
fan-out M−1. Otherwise P = ceil((G·F − M)/(M − 2)) partitions spill
through single-frame buffers while partition 0 aggregates in memory.

Every spilled run is recursed with fresh hash seeds. A run that stays
above 80% of its parent's frames, or that outlives the merge depth a
sort of the whole input would have needed, falls back to hash-sort
instead of recursing further.

The four operators differ in how they use the table before and after it
fills:

* original_hh      — partition 0 only; on overflow its groups are cut
                     to a run and partition 0 spills raw from then on.
* shared_hash      — all partitions share one table until the first
                     spill, then relocate into the original_hh shape.
* dynamic_destaging — every partition aggregates in its own frame list;
                     when the pool runs dry the largest resident
                     partition is evicted.
* pre_partitioning — the table fills once and is frozen; later records
                     either match a resident group (bloom-then-probe)
                     or spill, so resident keys never hit disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from aggbench import _kernels as K
from aggbench.core import (
    AggregationError,
    DatasetStats,
    FIELD_SIZE,
    InvalidBudget,
    KLEN_SIZE,
    LINK_SIZE,
    SLOT_SIZE,
)
from aggbench.hash_table import BLOOM_BYTE, ChainedHashTable, plan_table
from aggbench.operators.base import Operator, OpContext
from aggbench.operators.hash_sort import HashSort
from aggbench.run_store import (
    FrameSource,
    ORDER_NONE,
    RunInfo,
    plan_merge_rounds,
)

RECURSE = "recurse"
FALLBACK_HASH_SORT = "fallback_hash_sort"

# seed salts, one namespace per role; the level is mixed in above bit 8
_SALT_PART = 0x11
_SALT_SLOT = 0x22
_SALT_SPILL = 0x33

_MIN_GROUP = LINK_SIZE + KLEN_SIZE + 1 + FIELD_SIZE  # flush scratch bound


@dataclass
class HybridHashPlan:
    """Partitioning decision for one hybrid-hash level."""

    M: int
    P: int
    F: float
    r_res: float
    r_spill: float
    grace_levels: int = 0
    P_s: float | None = None  # predicted spill count (dynamic destaging)
    fallback_flags: tuple[str, ...] = ()

    @property
    def group_frames(self) -> float:
        """G·F that produced this plan (for reporting)."""
        return self._gf

    _gf: float = field(default=0.0, repr=False)


def fudge_factor(group_bytes: float, extra: float, slot_ratio: float = 1.0,
                 bloom: bool = False) -> float:
    """F such that G·F frames hold the table for G group frames.

    Per stored group the table pays a link and slot_ratio slot entries
    (plus a filter byte when bloom bytes are kept); extra is the slack
    multiplier on top.
    """
    per_group = group_bytes + LINK_SIZE + slot_ratio * (
        SLOT_SIZE + (BLOOM_BYTE if bloom else 0))
    return per_group * extra / max(group_bytes, 1e-300)


def plan_partitions(group_frames: float, M: int) -> int:
    """Spill-partition count: 0 in memory, else ceil((G·F−M)/(M−2))."""
    if M < 3:
        raise InvalidBudget(f"partition planning needs M >= 3, got {M}")
    if group_frames <= M:
        return 0
    p = math.ceil((group_frames - M) / (M - 2))
    return max(1, min(p, M - 2))


def plan_hybrid(stats: DatasetStats, M: int, F: float) -> HybridHashPlan:
    """Size one hybrid-hash level: P, input split, grace levels."""
    if M < 4:
        raise InvalidBudget(f"hybrid hashing needs M >= 4, got {M}")
    gf = stats.G * F
    levels = 0
    if gf >= float(M) * M:
        need = gf
        while need >= float(M) * M:
            levels += 1
            need = gf / float(M - 1) ** levels
    P = plan_partitions(gf, M)
    if P == 0:
        r_res, r_spill = 1.0, 0.0
    else:
        r_res = (M - P) / ((M - P) + M * P)
        r_spill = (1.0 - r_res) / P
    plan = HybridHashPlan(M=M, P=P, F=F, r_res=r_res, r_spill=r_spill,
                          grace_levels=levels)
    plan._gf = gf
    return plan


def sort_merge_levels(input_frames: float, M: int) -> int:
    """Merge rounds a sort of the whole input would need (fallback bound)."""
    fan = max(2, M - 1)
    runs = max(1, math.ceil(input_frames / fan))
    return len(plan_merge_rounds(runs, fan))


def fallback_controller(run_frames: float, parent_frames: float, level: int,
                        sort_levels: int) -> str:
    """Recurse into a spilled run, or give up and hash-sort it."""
    if parent_frames > 0 and run_frames > 0.8 * parent_frames:
        return FALLBACK_HASH_SORT
    if level > sort_levels:
        return FALLBACK_HASH_SORT
    return RECURSE


def make_cuts(r_res: float, P: int) -> np.ndarray:
    """Ascending partition cutoffs over the 32-bit hash space."""
    if P == 0:
        return np.array([K.HASH_SPACE], np.int64)
    cuts = np.empty(P + 1, np.int64)
    c0 = max(1, int(r_res * K.HASH_SPACE))
    rest = K.HASH_SPACE - c0
    for i in range(P):
        cuts[i + 1] = c0 + (rest * (i + 1)) // P
    cuts[0] = c0
    cuts[P] = K.HASH_SPACE
    return cuts


class _HybridBase(Operator):
    """Shared spill-buffer, grace-partitioning, and recursion machinery."""

    uses_bloom_capacity = False  # pre-partitioning charges the filter byte

    def __init__(self, ctx: OpContext, stats: DatasetStats, level: int = 0,
                 sort_levels: int | None = None):
        super().__init__(ctx, stats, level)
        self._sort_levels = (sort_levels if sort_levels is not None
                             else sort_merge_levels(stats.R,
                                                    ctx.memory_frames))
        self._grace_depth = 0
        self.mode = ""
        self.plan: HybridHashPlan | None = None
        self.writers: dict[int, object] = {}
        lv = self.level << 8
        self.part_seed = K.mix_seed(ctx.cfg.seed, _SALT_PART + lv)
        self.slot_seed = K.mix_seed(ctx.cfg.seed, _SALT_SLOT + lv)
        self.spill_seed = K.mix_seed(ctx.cfg.seed, _SALT_SPILL + lv)
        # placeholders for table-off pushes
        self._dummy_slots = np.full(1, -1, np.int64)
        self._dummy_bloom = np.zeros(1, np.uint8)
        self._dummy_tfids = np.zeros(1, np.int64)
        self._dummy_tmeta = np.zeros(2, np.int64)

    # -- planning -------------------------------------------------------------

    def _effective_stats(self) -> DatasetStats:
        """Stats with the caller's group estimate folded in at the top."""
        st = self.stats
        est = self.ctx.cfg.group_estimate
        if self.level == 0 and est is not None:
            b_g = self.group_bytes()
            gt = max(1.0, float(est))
            st = DatasetStats(R=st.R, R_t=max(st.R_t, gt),
                              G=gt * b_g / self.ctx.frame_size, G_t=gt)
            self.stats = st
        return st

    def _plan(self) -> HybridHashPlan:
        if self.plan is None:
            st = self._effective_stats()
            F = fudge_factor(self.group_bytes(), self.ctx.cfg.fudge,
                             self.ctx.cfg.slot_ratio,
                             bloom=self.uses_bloom_capacity)
            self.plan = plan_hybrid(st, self.ctx.memory_frames, F)
        return self.plan

    # -- run bookkeeping ------------------------------------------------------

    def _writer(self, pidx: int):
        w = self.writers.get(pidx)
        if w is None:
            w = self.new_writer(f"part{pidx}", ORDER_NONE)
            self.writers[pidx] = w
        return w

    def _flush_partials(self, bufmap: dict[int, int]) -> None:
        """Flush non-empty buffers (partition id -> frame) to their runs."""
        for pidx in sorted(bufmap):
            fid = bufmap[pidx]
            if self.ctx.alloc.used[fid] > 0:
                self.spill_frame(self._writer(pidx), fid)

    def _seal_all(self) -> dict[int, RunInfo]:
        runs = {pidx: self.seal_run(w) for pidx, w in
                sorted(self.writers.items())}
        self.writers = {}
        self.metrics.spilled_partitions += len(runs)
        return runs

    # -- recursion ------------------------------------------------------------

    def _child_estimate(self, est: float, records: float) -> float:
        if records <= 0:
            return 0.0
        return max(1.0, min(float(records), est))

    def _drain_runs(self, items):
        """items: FIFO of (runs, group_estimate); feeds each batch to a
        child operator (same class, next level, fresh seeds) or to the
        hash-sort fallback, yielding its output frames."""
        for runs, gest in items:
            frames = float(sum(r.frames for r in runs))
            records = float(sum(r.records for r in runs))
            gest = self._child_estimate(gest, records)
            decision = fallback_controller(frames, self.stats.R,
                                           self.level + 1, self._sort_levels)
            cstats = DatasetStats(
                R=frames, R_t=records,
                G=gest * self.group_bytes() / self.ctx.frame_size, G_t=gest)
            if decision == FALLBACK_HASH_SORT:
                child: Operator = HashSort(self.ctx, cstats, self.level + 1)
                self.metrics.fallbacks += 1
            else:
                child = self.__class__(self.ctx, cstats, self.level + 1,
                                       sort_levels=self._sort_levels)
                child._grace_depth = (self._grace_depth
                                      + (1 if self.mode == "grace" else 0))
            child.open()
            for run in runs:
                reader = run.open()
                src = FrameSource.from_run(reader)
                for frame in src:
                    out = child.push(frame)
                    if out is not None:
                        yield from out
                self.metrics.frames_read += src.frames_read
                self.metrics.frames_read_total += src.frames_read
                reader.close()
                run.delete()
            yield from child.close()

    # -- grace pre-partitioning ----------------------------------------------

    def _grace_open(self) -> None:
        ctx = self.ctx
        n = ctx.memory_frames - 1
        self._gr_bufs = ctx.alloc.allocate_many(n)
        self._gr_out = np.array(self._gr_bufs, np.int64)
        cuts = np.empty(n, np.int64)
        for i in range(n):
            cuts[i] = (K.HASH_SPACE * (i + 1)) // n
        cuts[n - 1] = K.HASH_SPACE
        self._gr_cuts = cuts
        self.mode = "grace"
        self.metrics.grace_levels = max(self.metrics.grace_levels,
                                        self._grace_depth + 1)

    def _grace_push(self, frame: np.ndarray) -> None:
        ctx = self.ctx
        soff = 0
        while True:
            st, soff, aux = K.k_hh_push(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame, soff,
                ctx.agg.state_width, self.slot_seed, self.part_seed,
                self._gr_cuts, 0, self._dummy_slots, 1, self._dummy_bloom, 0,
                self._dummy_tfids, 1, self._dummy_tmeta, self._gr_out,
                ctx.agg.merge_ops, self.ctr)
            if st == K.OUT_FULL:
                self.spill_frame(self._writer(int(aux)), self._gr_out[int(aux)])
                continue
            return

    def _grace_close(self):
        self._flush_partials({i: fid for i, fid in enumerate(self._gr_bufs)})
        self.ctx.alloc.release_many(self._gr_bufs)
        self._gr_bufs = []
        runs = self._seal_all()
        fan = self.ctx.memory_frames - 1
        gest = self.stats.G_t / fan
        yield from self._drain_runs(([run], gest) for _, run in
                                    sorted(runs.items()))

    # -- table flushing -------------------------------------------------------

    def _flush_table_to_writer(self, table: ChainedHashTable, stage: int,
                               writer) -> None:
        """Cut a table's groups (unfinalized, unsorted) to a run."""
        agg = self.ctx.agg
        table.flush_reset()
        while True:
            st = table.flush_step(stage, self.ctr, sort=False, finalize=False,
                                  finish_ops=agg.finish_ops,
                                  finish_src=agg.finish_src)
            if st == K.OUT_FULL or self.ctx.alloc.used[stage] > 0:
                self.spill_frame(writer, stage)
            if st != K.OUT_FULL:
                return

    def _yield_table(self, table: ChainedHashTable, stage: int):
        """Finalize a table's groups into the output stream."""
        agg = self.ctx.agg
        emit0 = int(self.ctr[K.CTR_EMIT])
        table.flush_reset()
        while True:
            st = table.flush_step(stage, self.ctr, sort=False, finalize=True,
                                  finish_ops=agg.finish_ops,
                                  finish_src=agg.finish_src)
            if st == K.OUT_FULL:
                yield self.ctx.alloc.view(stage)
                self.ctx.alloc.clear_frame(stage)
                continue
            break
        if self.ctx.alloc.used[stage] > 0:
            yield self.ctx.alloc.view(stage)
            self.ctx.alloc.clear_frame(stage)
        self.metrics.output_groups += int(self.ctr[K.CTR_EMIT]) - emit0


class OriginalHybridHash(_HybridBase):
    """Partition 0 aggregates in an M−P-frame table, the rest spill raw;
    a full table is cut to a run and partition 0 spills from then on."""

    algo_id = "original_hh"

    def open(self) -> None:
        plan = self._plan()
        if plan.grace_levels:
            self._grace_open()
            return
        ctx = self.ctx
        M = ctx.memory_frames
        self.P = plan.P
        b_g = self.group_bytes()
        if self.P >= 1:
            _, n_slots = plan_table(M - self.P, ctx.frame_size, b_g,
                                    ctx.cfg.slot_ratio)
            self.table = ChainedHashTable(ctx.alloc, ctx.agg.state_width,
                                          M - self.P, n_slots,
                                          seed=self.slot_seed)
            self._bufs = ctx.alloc.allocate_many(self.P)
            self._out = np.array([-1] + self._bufs, np.int64)
            self._cuts = make_cuts(plan.r_res, self.P)
        else:
            _, n_slots = plan_table(M - 1, ctx.frame_size, b_g,
                                    ctx.cfg.slot_ratio)
            self.table = ChainedHashTable(ctx.alloc, ctx.agg.state_width,
                                          M - 1, n_slots, seed=self.slot_seed)
            self._reserved = ctx.alloc.allocate()
            self._bufs = []
            self._out = np.array([-1], np.int64)
            self._cuts = make_cuts(1.0, 0)
        self._stored_at_cut = 0
        self.mode = "table"

    def _bufmap(self) -> dict[int, int]:
        if self.mode == "route":
            return {i: int(self._out[i]) for i in range(len(self._out))}
        return {i + 1: fid for i, fid in enumerate(self._bufs)}

    def push(self, frame: np.ndarray):
        if self.mode == "grace":
            self._grace_push(frame)
            return None
        ctx = self.ctx
        t = self.table
        soff = 0
        while True:
            if t is not None:
                slots, H = t.slots, t.n_slots
                tfids, ntf, tmeta = t.tfids, len(t.tfids), t.tmeta
                table_on = 1
            else:
                slots, H = self._dummy_slots, 1
                tfids, ntf, tmeta = self._dummy_tfids, 1, self._dummy_tmeta
                table_on = 0
            ins0 = int(self.ctr[K.CTR_INS])
            st, soff, aux = K.k_hh_push(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame, soff,
                ctx.agg.state_width, self.slot_seed, self.part_seed,
                self._cuts, table_on, slots, H, self._dummy_bloom, 0,
                tfids, ntf, tmeta, self._out, ctx.agg.merge_ops, self.ctr)
            if t is not None:
                t.stored_groups += int(self.ctr[K.CTR_INS]) - ins0
            if st == K.TABLE_FULL:
                self._overflow()
                t = self.table  # now None
                continue
            if st == K.OUT_FULL:
                pidx = int(aux)
                self.spill_frame(self._writer(pidx), int(self._out[pidx]))
                continue
            return None

    def _overflow(self) -> None:
        """Cut the table to partition 0's run; route its records raw after."""
        ctx = self.ctx
        if self.P >= 1:
            stage = self._bufs[0]
            if ctx.alloc.used[stage] > 0:
                self.spill_frame(self._writer(1), stage)
        else:
            stage = self._reserved
        w0 = self._writer(0)
        self._flush_table_to_writer(self.table, stage, w0)
        self._stored_at_cut = self.table.stored_groups
        self.table.close()
        self.table = None
        if self.P >= 1:
            b0 = ctx.alloc.allocate()
            self._out = np.array([b0] + self._bufs, np.int64)
        else:
            self._out = np.array([stage], np.int64)
            self._reserved = -1
        self.mode = "route"

    def close(self):
        if self.mode == "grace":
            yield from self._grace_close()
            return
        ctx = self.ctx
        self._flush_partials(self._bufmap())
        if self.table is not None:
            stage = self._bufs[0] if self.P >= 1 else self._reserved
            yield from self._yield_table(self.table, stage)
            self.table.close()
            self.table = None
        for fid in self._bufmap().values():
            ctx.alloc.release(fid)
        if self.P == 0 and self.mode == "table":
            ctx.alloc.release(self._reserved)
        runs = self._seal_all()
        items = []
        for pidx, run in sorted(runs.items()):
            if pidx == 0:
                suffix = max(run.records - self._stored_at_cut, 0)
                ratio = self.stats.G_t / max(self.stats.R_t, 1.0)
                est = self._stored_at_cut + suffix * ratio
            else:
                est = self.plan.r_spill * self.stats.G_t
            items.append(([run], est))
        yield from self._drain_runs(items)


class PrePartitioning(_HybridBase):
    """Fill the table once, freeze it, then aggregate hits in place and
    spill misses; groups resident when the table froze never hit disk."""

    algo_id = "pre_partitioning"
    uses_bloom_capacity = True

    def open(self) -> None:
        plan = self._plan()
        if plan.grace_levels:
            self._grace_open()
            return
        ctx = self.ctx
        M = ctx.memory_frames
        self.P = plan.P
        b_g = self.group_bytes()
        if self.P >= 1:
            bloom = self.P > 1
            _, n_slots = plan_table(M - self.P, ctx.frame_size, b_g,
                                    ctx.cfg.slot_ratio, bloom=bloom)
            self.table = ChainedHashTable(ctx.alloc, ctx.agg.state_width,
                                          M - self.P, n_slots,
                                          seed=self.slot_seed, bloom=bloom)
            self._bufs = ctx.alloc.allocate_many(self.P)
            self._out = np.array(self._bufs, np.int64)
            self._nspill = self.P
        else:
            _, n_slots = plan_table(M - 1, ctx.frame_size, b_g,
                                    ctx.cfg.slot_ratio)
            self.table = ChainedHashTable(ctx.alloc, ctx.agg.state_width,
                                          M - 1, n_slots, seed=self.slot_seed)
            self._reserved = ctx.alloc.allocate()
            self._bufs = []
            self._out = np.array([-1], np.int64)
            self._nspill = 0
        self.mode = "fill"

    def push(self, frame: np.ndarray):
        if self.mode == "grace":
            self._grace_push(frame)
            return None
        ctx = self.ctx
        soff = 0
        while True:
            if self.mode == "fill":
                st, soff = self.table.insert_frame(frame, soff,
                                                   ctx.agg.merge_ops,
                                                   self.ctr)
                if st == K.TABLE_FULL:
                    self._freeze()
                    continue
                return None
            t = self.table
            st, soff, aux = K.k_pp_probe(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame, soff,
                ctx.agg.state_width, t.seed, self.spill_seed, self._nspill,
                t.slots, t.n_slots, t.bloom, 1 if t.has_bloom else 0,
                self._out, ctx.agg.merge_ops, self.ctr)
            if st == K.OUT_FULL:
                pidx = int(aux)
                self.spill_frame(self._writer(pidx), int(self._out[pidx]))
                continue
            return None

    def _freeze(self) -> None:
        if self.P == 0:
            # the planner promised in-memory; repurpose the reserved output
            # frame as the single spill buffer
            self._out = np.array([self._reserved], np.int64)
            self._nspill = 1
        self.mode = "probe"
        self.ctx.notify("pp_frozen", self.table, self.level)

    def close(self):
        if self.mode == "grace":
            yield from self._grace_close()
            return
        ctx = self.ctx
        bufmap = {i: int(self._out[i]) for i in range(self._nspill)}
        self._flush_partials(bufmap)
        if self.P >= 1:
            stage = self._bufs[0]
        else:
            stage = self._reserved
        yield from self._yield_table(self.table, stage)
        resident = self.table.stored_groups
        self.table.close()
        for fid in self._bufs:
            ctx.alloc.release(fid)
        if self.P == 0:
            ctx.alloc.release(self._reserved)
        runs = self._seal_all()
        remaining = max(self.stats.G_t - resident, float(len(runs)))
        items = [([run], remaining / max(self._nspill, 1))
                 for _, run in sorted(runs.items())]
        yield from self._drain_runs(items)


class SharedHashing(_HybridBase):
    """One table shared by every partition until the first spill.

    Pre-spill, spilling partitions prefer P dedicated frames (so their
    groups sit together) and everyone overflows into the shared frames;
    one frame stays reserved as the future output buffer. The first
    spill cuts the dedicated frames to per-partition runs, relocates
    partition-0 groups into a fresh M−P-frame table, and turns the
    freed frames into spill buffers — the original_hh shape. A second
    overflow cuts partition 0 too and the rest is pure routing.
    """

    algo_id = "shared_hash"

    def open(self) -> None:
        plan = self._plan()
        if plan.grace_levels:
            self._grace_open()
            return
        ctx = self.ctx
        M = ctx.memory_frames
        p = ctx.frame_size
        b_g = self.group_bytes()
        self._min_group = (LINK_SIZE + KLEN_SIZE + 1
                           + FIELD_SIZE * ctx.agg.state_width)
        if plan.P == 0:
            _, n_slots = plan_table(M - 1, p, b_g, ctx.cfg.slot_ratio)
            self.table = ChainedHashTable(ctx.alloc, ctx.agg.state_width,
                                          M - 1, n_slots, seed=self.slot_seed)
            self._reserved = ctx.alloc.allocate()
            self.P = 0
            self._bufs = []
            self._stored_at_cut = 0
            self.mode = "mono"
            return
        _, H1 = plan_table(M - 1, p, b_g, ctx.cfg.slot_ratio)
        overhead1 = math.ceil(SLOT_SIZE * H1 / p)
        P = min(plan.P, M - 2 - overhead1)
        if P < 1:
            raise InvalidBudget(
                f"no room for a shared frame: M={M}, slot overhead "
                f"{overhead1}, P={plan.P}")
        if P != plan.P:
            plan.P = P
            plan.r_res = (M - P) / ((M - P) + M * P)
            plan.r_spill = (1.0 - plan.r_res) / P
        self.P = P
        self._reserved = ctx.alloc.allocate()
        self._oh1 = ctx.alloc.allocate_many(overhead1)
        storage = ctx.alloc.allocate_many(M - 1 - overhead1)
        self._ded = storage[:P]
        self._shared = storage[P:]
        self._ded_np = np.array(self._ded, np.int64)
        self._shared_np = np.array(self._shared, np.int64)
        self._H1 = H1
        self._slots1 = np.full(H1, -1, np.int64)
        self._tmeta1 = np.zeros(2, np.int64)
        self._cuts = make_cuts(plan.r_res, P)
        self._scratch1 = np.empty(
            len(storage) * (p // self._min_group) + 1, np.int64)
        self._stored_at_cut = 0
        self.mode = "shared"

    # -- push ----------------------------------------------------------------

    def push(self, frame: np.ndarray):
        if self.mode == "grace":
            self._grace_push(frame)
            return None
        ctx = self.ctx
        soff = 0
        while True:
            if self.mode == "shared":
                st, soff = K.k_sh_push(
                    ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame,
                    soff, ctx.agg.state_width, self.slot_seed, self.part_seed,
                    self._cuts, self._slots1, self._H1, self._ded_np,
                    self._shared_np, len(self._shared), self._tmeta1,
                    ctx.agg.merge_ops, self.ctr)
                if st == K.FIRST_SPILL:
                    self._relocate()
                    continue
                return None
            if self.mode == "mono":
                st, soff = self.table.insert_frame(frame, soff,
                                                   ctx.agg.merge_ops,
                                                   self.ctr)
                if st == K.TABLE_FULL:
                    self._mono_overflow()
                    continue
                return None
            # "table" (post-relocation) and "route" (post-second-spill)
            table_on = 1 if self.mode == "table" else 0
            if table_on:
                slots, H = self._slots2, self._H2
                tfids, ntf, tmeta = self._tfids2, self._ntf2, self._tmeta2
            else:
                slots, H = self._dummy_slots, 1
                tfids, ntf, tmeta = self._dummy_tfids, 1, self._dummy_tmeta
            st, soff, aux = K.k_hh_push(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame, soff,
                ctx.agg.state_width, self.slot_seed, self.part_seed,
                self._cuts, table_on, slots, H, self._dummy_bloom, 0,
                tfids, ntf, tmeta, self._out, ctx.agg.merge_ops, self.ctr)
            if st == K.TABLE_FULL:
                if (self._ntf2 < self._budget2
                        and ctx.alloc.free_count > 0):
                    self._tfids2[self._ntf2] = ctx.alloc.allocate()
                    self._ntf2 += 1
                    continue
                self._second_spill()
                continue
            if st == K.OUT_FULL:
                pidx = int(aux)
                self.spill_frame(self._writer(pidx), int(self._out[pidx]))
                continue
            return None

    # -- spill transitions ----------------------------------------------------

    def _relocate(self) -> None:
        """First spill: cut dedicated frames to runs, rehash partition 0
        into a fresh M−P-frame table, free frames become spill buffers."""
        ctx = self.ctx
        alloc = ctx.alloc
        M = ctx.memory_frames
        p = ctx.frame_size
        sw = ctx.agg.state_width
        P = self.P
        _, H2 = plan_table(M - P, p, self.group_bytes(), ctx.cfg.slot_ratio)
        overhead2 = math.ceil(SLOT_SIZE * H2 / p)
        # the smaller table needs fewer slot frames, so this always fits
        alloc.release_many(self._oh1)
        self._oh1 = []
        self._oh2 = alloc.allocate_many(overhead2)
        self._H2 = H2
        self._budget2 = (M - P) - overhead2
        self._slots2 = np.full(H2, -1, np.int64)
        self._tmeta2 = np.zeros(2, np.int64)
        self._tfids2 = np.full(M, -1, np.int64)
        self._ntf2 = 0
        free_pool: list[int] = []

        # dedicated frames hold only their own partition's groups; a zeroed
        # first cutoff makes partition 0 unreachable while they drain
        cuts_spill = self._cuts.copy()
        cuts_spill[0] = 0
        stage_out = np.full(P + 1, self._reserved, np.int64)
        stage_out[0] = -1
        for i, dfid in enumerate(self._ded):
            soff = 0
            while True:
                st, soff, aux = K.k_sh_relocate(
                    alloc.flat, alloc.used, p, dfid, soff, sw,
                    self.part_seed, cuts_spill, self._slots2, H2,
                    self.slot_seed, self._tfids2, self._ntf2, self._tmeta2,
                    stage_out, ctx.agg.merge_ops, self.ctr)
                if st == K.OUT_FULL:
                    self.spill_frame(self._writer(int(aux)), self._reserved)
                    continue
                if st == K.DST_FULL:
                    raise AggregationError(
                        "partition-0 group in a dedicated frame")
                break
            if alloc.used[self._reserved] > 0:
                self.spill_frame(self._writer(i + 1), self._reserved)
            alloc.clear_frame(dfid)
            free_pool.append(dfid)
        free_pool.append(self._reserved)
        self._reserved = -1

        # freed frames: P spill buffers + the new table's first frame
        self._bufs = [free_pool.pop(0) for _ in range(P)]
        self._out = np.array([-1] + self._bufs, np.int64)
        self._tfids2[0] = free_pool.pop(0)
        self._ntf2 = 1

        for sfid in self._shared:
            soff = 0
            while True:
                st, soff, aux = K.k_sh_relocate(
                    alloc.flat, alloc.used, p, sfid, soff, sw,
                    self.part_seed, self._cuts, self._slots2, H2,
                    self.slot_seed, self._tfids2, self._ntf2, self._tmeta2,
                    self._out, ctx.agg.merge_ops, self.ctr)
                if st == K.OUT_FULL:
                    pidx = int(aux)
                    self.spill_frame(self._writer(pidx),
                                     int(self._out[pidx]))
                    continue
                if st == K.DST_FULL:
                    if free_pool:
                        fid = free_pool.pop(0)
                    else:
                        fid = alloc.allocate()
                    self._tfids2[self._ntf2] = fid
                    self._ntf2 += 1
                    continue
                break
            alloc.clear_frame(sfid)
            free_pool.append(sfid)
        for fid in free_pool:
            alloc.release(fid)
        self._ded = []
        self._shared = []
        self.mode = "table"

    def _flush_new_table(self, stage: int, finalize: bool, sink) -> None:
        """Walk the post-relocation table's slots through the stage frame."""
        ctx = self.ctx
        agg = ctx.agg
        scratch = np.empty(
            self._ntf2 * (ctx.frame_size // self._min_group) + 1, np.int64)
        meta = np.array([-1, 0, -1], np.int64)
        while True:
            st = K.k_flush_slots(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, self._slots2,
                0, self._H2, meta, stage, agg.state_width,
                1 if finalize else 0, agg.finish_ops, agg.finish_src, 0,
                scratch, 0, self.ctr)
            if st == K.OUT_FULL or ctx.alloc.used[stage] > 0:
                sink(stage)
            if st != K.OUT_FULL:
                return

    def _second_spill(self) -> None:
        ctx = self.ctx
        stage = self._bufs[0]
        if ctx.alloc.used[stage] > 0:
            self.spill_frame(self._writer(1), stage)
        w0 = self._writer(0)
        self._flush_new_table(stage, False,
                              lambda fid: self.spill_frame(w0, fid))
        self._stored_at_cut = w0.records
        for i in range(self._ntf2):
            ctx.alloc.release(int(self._tfids2[i]))
        self._ntf2 = 0
        ctx.alloc.release_many(self._oh2)
        self._oh2 = []
        b0 = ctx.alloc.allocate()
        self._out = np.array([b0] + self._bufs, np.int64)
        self.mode = "route"

    def _mono_overflow(self) -> None:
        """P=0 plan overflowed: cut the table, spill everything after."""
        w0 = self._writer(0)
        self._flush_table_to_writer(self.table, self._reserved, w0)
        self._stored_at_cut = self.table.stored_groups
        self.table.close()
        self.table = None
        self._out = np.array([self._reserved], np.int64)
        self._cuts = make_cuts(1.0, 0)
        self._reserved = -1
        self.mode = "route"

    # -- close ----------------------------------------------------------------

    def close(self):
        if self.mode == "grace":
            yield from self._grace_close()
            return
        ctx = self.ctx
        agg = ctx.agg
        if self.mode == "shared":
            # never spilled: every partition is still resident in one table
            emit0 = int(self.ctr[K.CTR_EMIT])
            meta = np.array([-1, 0, -1], np.int64)
            while True:
                st = K.k_flush_slots(
                    ctx.alloc.flat, ctx.alloc.used, ctx.frame_size,
                    self._slots1, 0, self._H1, meta, self._reserved,
                    agg.state_width, 1, agg.finish_ops, agg.finish_src, 0,
                    self._scratch1, 0, self.ctr)
                if st == K.OUT_FULL:
                    yield ctx.alloc.view(self._reserved)
                    ctx.alloc.clear_frame(self._reserved)
                    continue
                break
            if ctx.alloc.used[self._reserved] > 0:
                yield ctx.alloc.view(self._reserved)
            self.metrics.output_groups += int(self.ctr[K.CTR_EMIT]) - emit0
            ctx.alloc.release(self._reserved)
            ctx.alloc.release_many(self._oh1)
            ctx.alloc.release_many(self._ded + self._shared)
            return
        if self.mode == "mono":
            yield from self._yield_table(self.table, self._reserved)
            self.table.close()
            self.table = None
            ctx.alloc.release(self._reserved)
            return
        if self.mode == "table":
            self._flush_partials(
                {i + 1: fid for i, fid in enumerate(self._bufs)})
            stage = self._bufs[0]
            emit0 = int(self.ctr[K.CTR_EMIT])
            # finalize straight into the output stream
            scratch = np.empty(
                self._ntf2 * (ctx.frame_size // self._min_group) + 1,
                np.int64)
            meta = np.array([-1, 0, -1], np.int64)
            while True:
                st = K.k_flush_slots(
                    ctx.alloc.flat, ctx.alloc.used, ctx.frame_size,
                    self._slots2, 0, self._H2, meta, stage, agg.state_width,
                    1, agg.finish_ops, agg.finish_src, 0, scratch, 0,
                    self.ctr)
                if st == K.OUT_FULL:
                    yield ctx.alloc.view(stage)
                    ctx.alloc.clear_frame(stage)
                    continue
                break
            if ctx.alloc.used[stage] > 0:
                yield ctx.alloc.view(stage)
                ctx.alloc.clear_frame(stage)
            self.metrics.output_groups += int(self.ctr[K.CTR_EMIT]) - emit0
            for i in range(self._ntf2):
                ctx.alloc.release(int(self._tfids2[i]))
            ctx.alloc.release_many(self._oh2)
            for fid in self._bufs:
                ctx.alloc.release(fid)
        else:  # "route"
            self._flush_partials(
                {i: int(self._out[i]) for i in range(len(self._out))})
            for fid in self._out:
                ctx.alloc.release(int(fid))
        runs = self._seal_all()
        items = []
        for pidx, run in sorted(runs.items()):
            if pidx == 0:
                suffix = max(run.records - self._stored_at_cut, 0)
                ratio = self.stats.G_t / max(self.stats.R_t, 1.0)
                est = self._stored_at_cut + suffix * ratio
            else:
                est = self.plan.r_spill * self.stats.G_t
            items.append(([run], est))
        yield from self._drain_runs(items)


def dd_spill_trajectory(G_t: float, M: int, nparts: int, overhead: int,
                        groups_per_frame: float) -> list[float]:
    """Expected evictions: one group count per cut, in eviction order.

    Pool frames beyond the slot pages, the staging frame, and one buffer
    frame per already-spilled partition hold the resident groups. The pool
    runs dry when the residents' combined groups reach that capacity; the
    largest partition (≈ the even share) is cut. Eviction stops once the
    survivors' full group sets fit the remaining pool.
    """
    if nparts <= 0 or groups_per_frame <= 0:
        return []
    g_full = G_t / nparts
    cuts: list[float] = []
    for s in range(nparts):
        residents = nparts - s
        g_cap = max((M - overhead - 1 - s), 0) * groups_per_frame
        if residents * g_full <= g_cap:
            break
        cuts.append(max(g_cap / residents, 0.0))
    return cuts


def predict_dd_spills(G_t: float, M: int, nparts: int, overhead: int,
                      groups_per_frame: float) -> int:
    """Expected number of partitions dynamic destaging will evict."""
    return len(dd_spill_trajectory(G_t, M, nparts, overhead,
                                   groups_per_frame))


def plan_dd_layout(M: int, frame_size: int, group_bytes: float,
                   slot_ratio: float, P_hint: int) -> tuple[int, int, int,
                                                            int, int]:
    """Destaging layout: (nparts, H_per, overhead, cap_full, H_total).

    Between 50% and 80% of memory is carved into partitions up front,
    then nparts shrinks until the slot frames, the staging frame, and
    one pool frame all fit beside the partition tails.
    """
    cap_full, H_total = plan_table(M, frame_size, group_bytes, slot_ratio)
    share = min(max(P_hint / M, 0.5), 0.8)
    nparts = max(2, round(share * M))
    H_per = max(1, H_total // nparts)
    for _ in range(5):
        H_per = max(1, H_total // nparts)
        overhead = math.ceil(SLOT_SIZE * H_per * nparts / frame_size)
        limit = M - overhead - 2  # staging frame + one pool frame
        if nparts <= limit:
            break
        nparts = limit
    if nparts < 2:
        raise InvalidBudget(
            f"dynamic destaging needs room for 2 partitions, M={M}")
    return nparts, H_per, overhead, cap_full, H_total


class DynamicDestaging(_HybridBase):
    """Every partition aggregates in its own frame list; the shared pool
    feeds growth and the largest resident partition is evicted (cut to a
    run, reduced to one spill buffer) whenever the pool runs dry."""

    algo_id = "dynamic_destaging"

    def open(self) -> None:
        plan = self._plan()
        if plan.grace_levels:
            self._grace_open()
            return
        ctx = self.ctx
        M = ctx.memory_frames
        b_g = self.group_bytes()
        nparts, H_per, overhead, cap_full, _ = plan_dd_layout(
            M, ctx.frame_size, b_g, ctx.cfg.slot_ratio, plan.P)
        self.nparts = nparts
        self._H_per = H_per
        plan.P_s = float(predict_dd_spills(
            self.stats.G_t, M, nparts, overhead,
            ctx.frame_size / (LINK_SIZE + b_g)))
        self._oh = ctx.alloc.allocate_many(overhead)
        self._staging = ctx.alloc.allocate()
        tails = ctx.alloc.allocate_many(nparts)
        self._tail = np.array(tails, np.int64)
        self._frames: list[list[int]] = [[f] for f in tails]
        self._spilled = np.zeros(nparts, np.uint8)
        self._buf = np.full(nparts, -1, np.int64)
        self._slots = np.full(nparts * H_per, -1, np.int64)
        self._spill_order: list[int] = []
        self._min_group = (LINK_SIZE + KLEN_SIZE + 1
                           + FIELD_SIZE * ctx.agg.state_width)
        self.mode = "push"

    def push(self, frame: np.ndarray):
        if self.mode == "grace":
            self._grace_push(frame)
            return None
        ctx = self.ctx
        soff = 0
        while True:
            st, soff, aux = K.k_dd_push(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame, soff,
                ctx.agg.state_width, self.slot_seed, self.part_seed,
                self.nparts, self._slots, self._H_per, self._tail,
                self._spilled, self._buf, ctx.agg.merge_ops, self.ctr)
            if st == K.NEED_FRAME:
                q = int(aux)
                if ctx.alloc.free_count > 0:
                    fid = ctx.alloc.allocate()
                    self._frames[q].append(fid)
                    self._tail[q] = fid
                else:
                    self._evict()
                continue
            if st == K.OUT_FULL:
                q = int(aux)
                self.spill_frame(self._writer(q), int(self._buf[q]))
                continue
            return None

    def _evict(self) -> None:
        """Cut the partition holding the most frames (ties: lowest id)."""
        best = -1
        best_n = -1
        for q in range(self.nparts):
            if self._spilled[q]:
                continue
            n = len(self._frames[q])
            if n > best_n:
                best, best_n = q, n
        if best < 0:
            raise AggregationError("pool empty with no resident partition")
        self._cut_partition(best)
        fl = self._frames[best]
        self.ctx.alloc.clear_frame(fl[0])
        self._buf[best] = fl[0]
        for fid in fl[1:]:
            self.ctx.alloc.release(fid)
        self._frames[best] = []
        self._spilled[best] = 1
        self._tail[best] = -1
        self._spill_order.append(best)

    def _cut_partition(self, q: int) -> None:
        """Spill one partition's slot range through the staging frame."""
        ctx = self.ctx
        agg = ctx.agg
        writer = self._writer(q)
        scratch = np.empty(
            len(self._frames[q]) * (ctx.frame_size // self._min_group) + 1,
            np.int64)
        meta = np.array([-1, 0, -1], np.int64)
        lo = q * self._H_per
        hi = lo + self._H_per
        while True:
            st = K.k_flush_slots(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, self._slots,
                lo, hi, meta, self._staging, agg.state_width, 0,
                agg.finish_ops, agg.finish_src, 0, scratch, 0, self.ctr)
            if st == K.OUT_FULL:
                self.spill_frame(writer, self._staging)
                continue
            break
        if ctx.alloc.used[self._staging] > 0:
            self.spill_frame(writer, self._staging)
        self._slots[lo:hi] = -1

    def close(self):
        if self.mode == "grace":
            yield from self._grace_close()
            return
        ctx = self.ctx
        agg = ctx.agg
        # spill buffers first, then stream resident partitions out directly,
        # packing the staging frame across partition boundaries
        self._flush_partials({q: int(self._buf[q])
                              for q in self._spill_order})
        emit0 = int(self.ctr[K.CTR_EMIT])
        for q in range(self.nparts):
            if self._spilled[q]:
                continue
            scratch = np.empty(
                len(self._frames[q]) * (ctx.frame_size // self._min_group)
                + 1, np.int64)
            meta = np.array([-1, 0, -1], np.int64)
            lo = q * self._H_per
            hi = lo + self._H_per
            while True:
                st = K.k_flush_slots(
                    ctx.alloc.flat, ctx.alloc.used, ctx.frame_size,
                    self._slots, lo, hi, meta, self._staging,
                    agg.state_width, 1, agg.finish_ops, agg.finish_src, 0,
                    scratch, 0, self.ctr)
                if st == K.OUT_FULL:
                    yield ctx.alloc.view(self._staging)
                    ctx.alloc.clear_frame(self._staging)
                    continue
                break
        if ctx.alloc.used[self._staging] > 0:
            yield ctx.alloc.view(self._staging)
            ctx.alloc.clear_frame(self._staging)
        self.metrics.output_groups += int(self.ctr[K.CTR_EMIT]) - emit0
        for q in range(self.nparts):
            for fid in self._frames[q]:
                ctx.alloc.release(fid)
            self._frames[q] = []
            if self._buf[q] != -1:
                ctx.alloc.release(int(self._buf[q]))
        ctx.alloc.release(self._staging)
        ctx.alloc.release_many(self._oh)
        runs = self._seal_all()
        # partition tuning: batch consecutive small runs that fit one pass
        F = fudge_factor(self.group_bytes(), ctx.cfg.fudge,
                         ctx.cfg.slot_ratio)
        b_g = self.group_bytes()
        M = ctx.memory_frames
        items: list[tuple[list[RunInfo], float]] = []
        batch: list[RunInfo] = []
        batch_g = 0.0
        for q in self._spill_order:
            run = runs.get(q)
            if run is None:
                continue
            gest = self._child_estimate(self.stats.G_t / self.nparts,
                                        run.records)
            gf = (batch_g + gest) * b_g / ctx.frame_size * F
            if batch and gf > M:
                items.append((batch, batch_g))
                batch, batch_g = [], 0.0
            batch.append(run)
            batch_g += gest
        if batch:
            items.append((batch, batch_g))
        yield from self._drain_runs(items)
