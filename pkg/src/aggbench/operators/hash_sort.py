"""Hash-sort grouping: aggregate first, sort per slot only when spilling.

Records fold into an M-1-frame chained hash table as they arrive, so
duplicate keys collapse before any byte is written. When the table
fills, each slot's chain is sorted and the whole table is flushed as a
run ordered by (slot-id, key); runs already hold one record per group,
so merge rounds keep folding and shrink their inputs. If every group
fits, the table is emitted directly and the merge phase never runs.
"""

from __future__ import annotations

from aggbench import _kernels as K
from aggbench.core import DatasetStats, InvalidBudget
from aggbench.hash_table import ChainedHashTable, plan_table
from aggbench.operators.base import Operator, OpContext
from aggbench.run_store import MergeDriver, ORDER_SLOT_KEY, RunInfo


class HashSort(Operator):
    algo_id = "hash_sort"

    def __init__(self, ctx: OpContext, stats: DatasetStats, level: int = 0):
        super().__init__(ctx, stats, level)
        self.runs: list[RunInfo] = []

    def open(self) -> None:
        ctx = self.ctx
        M = ctx.memory_frames
        if M < 3:
            raise InvalidBudget(f"hash-sort grouping needs M >= 3, got {M}")
        self._slot_seed = K.mix_seed(ctx.cfg.seed, 0x45 + (self.level << 8))
        self._sort_seed = K.mix_seed(ctx.cfg.seed, 0x46 + (self.level << 8))
        _, n_slots = plan_table(M - 1, ctx.frame_size, self.group_bytes(),
                                ctx.cfg.slot_ratio)
        self.table = ChainedHashTable(ctx.alloc, ctx.agg.state_width, M - 1,
                                      n_slots, seed=self._slot_seed)
        self._recs_mark = int(self.ctr[K.CTR_RECS])

    def push(self, frame):
        soff = 0
        while True:
            st, soff = self.table.insert_frame(frame, soff,
                                               self.ctx.agg.merge_ops,
                                               self.ctr)
            if st == K.TABLE_FULL:
                self._flush_to_run()
                continue
            return None

    def _flush_to_run(self) -> None:
        """Sort each chain and cut the table to a (slot-id, key) run."""
        ctx = self.ctx
        agg = ctx.agg
        writer = self.new_writer("hashsorted", ORDER_SLOT_KEY)
        out = ctx.alloc.allocate()
        self.table.flush_reset()
        while True:
            st = self.table.flush_step(out, self.ctr, sort=True,
                                       finalize=False, finish_ops=agg.finish_ops,
                                       finish_src=agg.finish_src,
                                       sort_seed=self._sort_seed)
            if st != K.OUT_FULL and ctx.alloc.used[out] == 0:
                break
            writer.write_frame(ctx.alloc.view(out))
            self.metrics.frames_written += 1
            self.metrics.frames_written_total += 1
            ctx.alloc.clear_frame(out)
            if st != K.OUT_FULL:
                break
        writer.records = self.table.stored_groups
        ctx.alloc.release(out)
        recs = int(self.ctr[K.CTR_RECS])
        run = self.seal_run(writer)
        run.raw_records = recs - self._recs_mark
        self._recs_mark = recs
        self.runs.append(run)
        self.table.clear()

    def close(self):
        ctx = self.ctx
        agg = ctx.agg
        if not self.runs:
            # everything collapsed in memory: emit straight from the table
            out = ctx.alloc.allocate()
            emit0 = int(self.ctr[K.CTR_EMIT])
            self.table.flush_reset()
            while True:
                st = self.table.flush_step(out, self.ctr, sort=False,
                                           finalize=True,
                                           finish_ops=agg.finish_ops,
                                           finish_src=agg.finish_src)
                if st == K.OUT_FULL:
                    yield ctx.alloc.view(out)
                    ctx.alloc.clear_frame(out)
                    continue
                break
            if ctx.alloc.used[out] > 0:
                yield ctx.alloc.view(out)
            ctx.alloc.release(out)
            self.metrics.output_groups += int(self.ctr[K.CTR_EMIT]) - emit0
            self.table.close()
            return

        if self.table.stored_groups > 0:
            self._flush_to_run()
        n_slots, seed = self.table.n_slots, self.table.seed
        self.table.close()
        driver = MergeDriver(ctx.alloc, agg, ctx.memory_frames - 1,
                             ctx.tmp_path("hsmerge"), self.metrics, self.ctr,
                             mode=ORDER_SLOT_KEY, n_slots=n_slots,
                             slot_seed=seed, fold_intermediate=True)
        yield from driver.final_frames(self.runs)
        self.runs = []
        self.metrics.output_groups += driver.final_records
