"""Sort-based grouping: quicksorted memory loads, merged with a fold.

Each load fills M-1 frames, is sorted by key through an address array,
and is cut to a run. Runs are merged with a loser tree; only the final
round folds equal keys and finalizes, so intermediate rounds move raw
records untouched and the group phase is pipelined with the last merge.
A one-record-per-key input that already fits in memory produces zero
run files. When the caller declares the input sorted, the operator
degenerates to a single streaming fold that emits groups as it reads.
"""

from __future__ import annotations

import numpy as np

from aggbench import _kernels as K
from aggbench.core import DatasetStats, InvalidBudget, InvalidRecord
from aggbench.operators.base import Operator, OpContext
from aggbench.run_store import MergeDriver, ORDER_KEY, RunInfo

_INITIAL_ADDRS = 8192


class SortBased(Operator):
    algo_id = "sort_based"

    def __init__(self, ctx: OpContext, stats: DatasetStats, level: int = 0,
                 sorted_input: bool | None = None):
        super().__init__(ctx, stats, level)
        self.sorted_input = (ctx.cfg.input_sorted if sorted_input is None
                             else sorted_input)
        self.runs: list[RunInfo] = []

    def open(self) -> None:
        ctx = self.ctx
        M = ctx.memory_frames
        if M < 3:
            raise InvalidBudget(f"sort-based grouping needs M >= 3, got {M}")
        agg = ctx.agg
        self._sort_seed = K.mix_seed(ctx.cfg.seed, 0x5B + (self.level << 8))
        if self.sorted_input:
            self._out = ctx.alloc.allocate()
            self._cur_key = np.zeros(0x10000, np.uint8)
            self._cur_meta = np.zeros(2, np.int64)
            self._cur_state = np.zeros(agg.state_width, np.float64)
            self._emit0 = int(self.ctr[K.CTR_EMIT])
            return
        self._lfids = ctx.alloc.allocate_many(M - 1)
        self._lfids_np = np.array(self._lfids, np.int64)
        self._lmeta = np.zeros(1, np.int64)
        self._addrs = np.empty(_INITIAL_ADDRS, np.int64)
        self._naddr = 0

    # -- streaming path (pre-sorted input) -----------------------------------

    def _push_sorted(self, frame: np.ndarray):
        ctx = self.ctx
        agg = ctx.agg
        soff = 0
        while True:
            st, soff = K.k_stream_fold(
                frame, soff, ctx.frame_size, ctx.alloc.used, ctx.alloc.flat,
                self._cur_key, self._cur_meta, self._cur_state, self._out,
                agg.state_width, 1, agg.finish_ops, agg.finish_src,
                agg.merge_ops, self.ctr)
            if st == K.OUT_FULL:
                yield ctx.alloc.view(self._out)
                ctx.alloc.clear_frame(self._out)
                continue
            if st == K.ORDER_ERR:
                from aggbench.core import MergeOrderError

                raise MergeOrderError(
                    "input declared sorted but a key decreased")
            return

    # -- load-sort-spill path -------------------------------------------------

    def push(self, frame: np.ndarray):
        if self.sorted_input:
            return self._push_sorted(frame)
        ctx = self.ctx
        soff = 0
        while True:
            st, soff, self._naddr = K.k_sort_load(
                ctx.alloc.flat, ctx.alloc.used, ctx.frame_size, frame, soff,
                self._lfids_np, len(self._lfids), self._lmeta, self._addrs,
                self._naddr, ctx.agg.state_width, self.ctr)
            if st == K.ADDR_FULL:
                self._addrs = np.concatenate(
                    [self._addrs, np.empty(len(self._addrs), np.int64)])
                continue
            if st == K.LOAD_FULL:
                self._cut_run()
                continue
            return None

    def _sort_load(self) -> None:
        if self._naddr > 1:
            K.k_quicksort_addrs(self.ctx.alloc.flat, self._addrs, 0,
                                self._naddr, self._sort_seed, self.ctr)

    def _reset_load(self) -> None:
        for fid in self._lfids:
            self.ctx.alloc.clear_frame(fid)
        self._lmeta[0] = 0
        self._naddr = 0

    def _cut_run(self) -> None:
        """Sort the current load and write it, unfolded, as one run."""
        if self._naddr == 0:
            raise InvalidRecord("record larger than a memory load")
        ctx = self.ctx
        self._sort_load()
        writer = self.new_writer("sorted", ORDER_KEY)
        out = ctx.alloc.allocate()
        meta = np.zeros(1, np.int64)
        while True:
            st = K.k_emit_addrs(ctx.alloc.flat, ctx.alloc.used,
                                ctx.frame_size, self._addrs, self._naddr,
                                meta, out, ctx.agg.state_width, self.ctr)
            if st != K.OUT_FULL and ctx.alloc.used[out] == 0:
                break
            writer.write_frame(ctx.alloc.view(out))
            self.metrics.frames_written += 1
            self.metrics.frames_written_total += 1
            ctx.alloc.clear_frame(out)
            if st != K.OUT_FULL:
                break
        writer.records = self._naddr
        ctx.alloc.release(out)
        self.runs.append(self.seal_run(writer))
        self._reset_load()

    def close(self):
        ctx = self.ctx
        agg = ctx.agg
        if self.sorted_input:
            st = K.k_fold_finish(ctx.alloc.flat, ctx.alloc.used,
                                 ctx.frame_size, self._cur_key,
                                 self._cur_meta, self._cur_state, self._out,
                                 agg.state_width, 1, agg.finish_ops,
                                 agg.finish_src, self.ctr)
            if st == K.OUT_FULL:
                yield ctx.alloc.view(self._out)
                ctx.alloc.clear_frame(self._out)
                K.k_fold_finish(ctx.alloc.flat, ctx.alloc.used,
                                ctx.frame_size, self._cur_key, self._cur_meta,
                                self._cur_state, self._out, agg.state_width,
                                1, agg.finish_ops, agg.finish_src, self.ctr)
            if ctx.alloc.used[self._out] > 0:
                yield ctx.alloc.view(self._out)
            ctx.alloc.release(self._out)
            self.metrics.output_groups += (int(self.ctr[K.CTR_EMIT])
                                           - self._emit0)
            return

        if not self.runs:
            yield from self._emit_in_memory()
            return

        if self._naddr:
            self._cut_run()
        ctx.alloc.release_many(self._lfids)
        self._lfids = []
        driver = MergeDriver(ctx.alloc, agg, ctx.memory_frames - 1,
                             ctx.tmp_path("sortmerge"), self.metrics,
                             self.ctr, mode=ORDER_KEY,
                             fold_intermediate=False)
        yield from driver.final_frames(self.runs)
        self.runs = []
        self.metrics.output_groups += driver.final_records

    def _emit_in_memory(self):
        """Whole input fit in one load: sort, fold, finalize, no run files."""
        ctx = self.ctx
        agg = ctx.agg
        self._sort_load()
        out = ctx.alloc.allocate()
        meta = np.zeros(1, np.int64)
        cur_key = np.zeros(0x10000, np.uint8)
        cur_meta = np.zeros(2, np.int64)
        cur_state = np.zeros(agg.state_width, np.float64)
        emit0 = int(self.ctr[K.CTR_EMIT])
        while True:
            st = K.k_fold_sorted(ctx.alloc.flat, ctx.alloc.used,
                                 ctx.frame_size, self._addrs, self._naddr,
                                 meta, cur_key, cur_meta, cur_state, out,
                                 agg.state_width, 1, agg.finish_ops,
                                 agg.finish_src, agg.merge_ops, self.ctr)
            if st == K.OUT_FULL:
                yield ctx.alloc.view(out)
                ctx.alloc.clear_frame(out)
                continue
            break
        while True:
            st = K.k_fold_finish(ctx.alloc.flat, ctx.alloc.used,
                                 ctx.frame_size, cur_key, cur_meta, cur_state,
                                 out, agg.state_width, 1, agg.finish_ops,
                                 agg.finish_src, self.ctr)
            if st == K.OUT_FULL:
                yield ctx.alloc.view(out)
                ctx.alloc.clear_frame(out)
                continue
            break
        if ctx.alloc.used[out] > 0:
            yield ctx.alloc.view(out)
        ctx.alloc.release(out)
        ctx.alloc.release_many(self._lfids)
        self._lfids = []
        self.metrics.output_groups += int(self.ctr[K.CTR_EMIT]) - emit0
