"""Operator scaffolding: configuration, shared context, the push driver.

All operators speak one interface: open() once, push(frame) per input
frame, close() to finish. push() may return an iterator of finished
output frames (pipelining operators do); close() always yields the
remaining output. Yielded buffers are reused, so a consumer must copy or
fully process each frame before advancing.

Input frames arrive in caller-owned buffers and are not charged against
the operator's frame budget; everything the operator materializes —
hash tables, sort loads, spill buffers, merge frames — comes from its
allocator, whose high-water mark is the enforced memory bound.

Metric conventions: frames_written / frames_read count run-file traffic
(spills, merge rounds, re-reads of recursed runs). The top-level input
scan and the final output stream are bookkept only in the *_total
variants, so the plain counters line up with what the cost models call
I/O.
"""

from __future__ import annotations

import itertools
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from aggbench import _kernels as K
from aggbench.core import (
    AggregationError,
    AggSpec,
    DEFAULT_FRAME_SIZE,
    DatasetStats,
    FIELD_SIZE,
    FrameAllocator,
    InvalidBudget,
    KLEN_SIZE,
    LINK_SIZE,
    Metrics,
)
from aggbench.run_store import RunInfo, RunWriter

_ctx_seq = itertools.count()


@dataclass
class EngineConfig:
    """Knobs shared by every operator and the planner."""

    memory_frames: int
    frame_size: int = DEFAULT_FRAME_SIZE
    fudge: float = 1.2  # extra-space ratio folded into the fudge factor F
    slot_ratio: float = 1.0  # hash slots per expected group
    seed: int = 0
    tmp_dir: str | None = None  # default: $AGGBENCH_TMP, then system tmp
    input_sorted: bool = False
    group_estimate: float | None = None  # distinct keys; None = trust stats

    def resolve_tmp(self) -> str:
        return (self.tmp_dir or os.environ.get("AGGBENCH_TMP")
                or tempfile.gettempdir())


class OpContext:
    """Per-run bundle: allocator, metrics, kernel counters, temp files.

    Build a fresh context per measured run; counters are cumulative.
    Recursive child operators share the parent's context so the budget
    and the metrics cover the whole tree.
    """

    def __init__(self, cfg: EngineConfig, agg: AggSpec):
        if cfg.memory_frames < 2:
            raise InvalidBudget(
                f"need at least 2 frames, got {cfg.memory_frames}")
        self.cfg = cfg
        self.agg = agg
        self.alloc = FrameAllocator(cfg.memory_frames, cfg.frame_size)
        self.metrics = Metrics()
        self.ctr = np.zeros(K.N_CTR, np.int64)
        self.observers: dict[str, object] = {}  # test hooks, keyed by event
        self._tmp_root = cfg.resolve_tmp()
        self._tmp_dir: str | None = None
        self._tmp_seq = itertools.count()

    @property
    def memory_frames(self) -> int:
        return self.cfg.memory_frames

    @property
    def frame_size(self) -> int:
        return self.cfg.frame_size

    def tmp_path(self, tag: str) -> str:
        if self._tmp_dir is None:
            self._tmp_dir = os.path.join(
                self._tmp_root,
                f"aggbench-{os.getpid()}-{next(_ctx_seq):04d}")
            os.makedirs(self._tmp_dir, exist_ok=True)
        return os.path.join(self._tmp_dir,
                            f"{next(self._tmp_seq):06d}-{tag}.run")

    def notify(self, event: str, *args) -> None:
        cb = self.observers.get(event)
        if cb is not None:
            cb(*args)

    def cleanup(self) -> None:
        if self._tmp_dir is not None:
            import shutil

            shutil.rmtree(self._tmp_dir, ignore_errors=True)
            self._tmp_dir = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.cleanup()


class Operator:
    """Base class for the streaming aggregation operators."""

    algo_id = "?"

    def __init__(self, ctx: OpContext, stats: DatasetStats, level: int = 0):
        self.ctx = ctx
        self.stats = stats
        self.level = level
        self.metrics = ctx.metrics
        self.ctr = ctx.ctr
        ctx.metrics.recursion_depth = max(ctx.metrics.recursion_depth, level)

    # -- sizing helpers -----------------------------------------------------

    def group_bytes(self) -> float:
        """Estimated stored bytes per group record (key + states)."""
        st = self.stats
        if st.G_t > 0 and st.G > 0:
            return max(st.G * self.ctx.frame_size / st.G_t,
                       KLEN_SIZE + 1 + FIELD_SIZE * self.ctx.agg.state_width)
        return KLEN_SIZE + 16 + FIELD_SIZE * self.ctx.agg.state_width

    # -- run-file helpers ---------------------------------------------------

    def new_writer(self, tag: str, order_kind: int) -> RunWriter:
        return RunWriter(self.ctx.tmp_path(tag), self.ctx.frame_size,
                         order_kind, level=self.level)

    def spill_frame(self, writer: RunWriter, fid: int) -> None:
        """Write one buffered frame to a run and clear it for reuse."""
        frame = self.ctx.alloc.view(fid)
        writer.records += int(K.k_count_records(frame, self.ctx.frame_size,
                                                self.ctx.agg.state_width))
        writer.write_frame(frame)
        self.metrics.frames_written += 1
        self.metrics.frames_written_total += 1
        self.ctx.alloc.clear_frame(fid)

    def seal_run(self, writer: RunWriter) -> RunInfo:
        writer.close()
        info = RunInfo(writer.path, writer.frames, writer.records,
                       writer.order_kind, writer.level,
                       raw_records=writer.records)
        self.ctx.notify("run_sealed", info, self.algo_id, self.level)
        return info

    # -- interface ----------------------------------------------------------

    def open(self) -> None:
        raise NotImplementedError

    def push(self, frame: np.ndarray) -> Iterator[np.ndarray] | None:
        raise NotImplementedError

    def close(self) -> Iterator[np.ndarray]:
        raise NotImplementedError


def run_operator(op: Operator, source) -> Iterator[np.ndarray]:
    """Drive an operator over a frame source; yields final output frames.

    Stamps time_to_first_result at the first finished frame and settles
    the totals (input-scan reads, output writes, comparison counters,
    high-water) when the stream ends.
    """
    m = op.metrics
    ctx = op.ctx
    t0 = time.perf_counter()
    op.open()

    def finished(frames):
        for fr in frames:
            if m.time_to_first_result == 0.0:
                m.time_to_first_result = time.perf_counter() - t0
            m.frames_written_total += 1
            yield fr

    for frame in source:
        out = op.push(frame)
        if out is not None:
            yield from finished(out)
    yield from finished(op.close())

    m.frames_read_total += source.frames_read
    m.comparisons = int(ctx.ctr[K.CTR_CMP])
    m.group_compares = int(ctx.ctr[K.CTR_GCMP])
    m.high_water = max(m.high_water, ctx.alloc.high_water)
    m.total_time = time.perf_counter() - t0
    if ctx.alloc.outstanding:
        raise AggregationError(
            f"{op.algo_id} leaked {ctx.alloc.outstanding} frames")


def collect_groups(op: Operator, source) -> dict[bytes, tuple]:
    """Drain an operator into {key: finished-values} (tests, validation)."""
    from aggbench.core import iter_records

    width = op.ctx.agg.out_width
    out: dict[bytes, tuple] = {}
    for frame in run_operator(op, source):
        for key, vals in iter_records(frame, width):
            if key in out:
                raise AggregationError(f"duplicate output key {key!r}")
            out[key] = vals
    return out
