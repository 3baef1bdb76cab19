"""Frame files, streaming sources, and the multi-round run merger.

Datasets and spill runs share one container: a 16-byte header followed by
fixed-size frames. Partial trailing frames are zero-padded, which the record
codec's zero-length sentinel turns into a clean end-of-frame marker.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from aggbench import _kernels as K
from aggbench.core import (
    AggSpec,
    FrameAllocator,
    InvalidRecord,
    KLEN_SIZE,
    MergeOrderError,
    Metrics,
)

MAGIC = b"AGB1"
HEADER = struct.Struct("<4sBBBBII")  # magic, ver, order, level, pad, p, frames
HEADER_SIZE = HEADER.size
VERSION = 1

ORDER_NONE = 0  # arbitrary record order (raw datasets, partition spills)
ORDER_KEY = 1  # nondecreasing key bytes
ORDER_SLOT_KEY = 2  # nondecreasing (slot, key); slot = hash(key) % H


class RunWriter:
    """Writes a frame file; the header is patched with the count on close."""

    def __init__(self, path: str, frame_size: int, order_kind: int = ORDER_NONE,
                 level: int = 0):
        self.path = path
        self.frame_size = frame_size
        self.order_kind = order_kind
        self.level = level
        self.frames = 0
        self.records = 0  # caller-maintained convenience tally
        self._f = open(path, "wb")
        self._f.write(HEADER.pack(MAGIC, VERSION, order_kind, level, 0,
                                  frame_size, 0))

    def write_frame(self, buf: np.ndarray) -> None:
        self._f.write(buf.tobytes())
        self.frames += 1

    def close(self) -> None:
        if self._f is None:
            return
        self._f.seek(0)
        self._f.write(HEADER.pack(MAGIC, VERSION, self.order_kind, self.level,
                                  0, self.frame_size, self.frames))
        self._f.close()
        self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RunReader:
    """Sequential frame reader over a run or dataset file."""

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "rb")
        raw = self._f.read(HEADER_SIZE)
        magic, ver, order, level, _, p, frames = HEADER.unpack(raw)
        if magic != MAGIC or ver != VERSION:
            raise InvalidRecord(f"{path}: not a frame file")
        self.frame_size = p
        self.order_kind = order
        self.level = level
        self.frames = frames
        self._next = 0

    def read_into(self, buf: np.ndarray) -> bool:
        """Read the next frame into buf; False when exhausted."""
        if self._next >= self.frames:
            return False
        n = self._f.readinto(memoryview(buf)[: self.frame_size])
        if n != self.frame_size:
            raise InvalidRecord(f"{self.path}: truncated frame")
        self._next += 1
        return True

    def rewind(self) -> None:
        self._f.seek(HEADER_SIZE)
        self._next = 0

    def close(self) -> None:
        if self._f is not None:
            self._f.close()
            self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class RunInfo:
    """In-memory handle for a spill run awaiting a merge or recursion."""

    path: str
    frames: int
    records: int
    order_kind: int = ORDER_NONE
    level: int = 0
    raw_records: int = 0  # pre-aggregation records this run stands for

    def open(self) -> RunReader:
        return RunReader(self.path)

    def delete(self) -> None:
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


class FrameSource:
    """Streams state-record frames into a caller-owned buffer.

    The yielded array is reused between iterations. Raw (key, payload)
    datasets are expanded to (key, states) on the fly; run files pass
    through. File frames read are tallied in frames_read for the *_total
    metrics; the input scan is not part of the model-comparable counts.
    """

    def __init__(self, frame_size: int):
        self.frame_size = frame_size
        self.frames_read = 0

    def __iter__(self):
        raise NotImplementedError

    @staticmethod
    def from_run(reader: RunReader) -> "FrameSource":
        return _RunSource(reader)

    @staticmethod
    def from_dataset(reader: RunReader, spec: AggSpec) -> "FrameSource":
        return _ExpandSource(reader, spec)

    @staticmethod
    def from_frames(frames, frame_size: int) -> "FrameSource":
        return _ListSource(frames, frame_size)


class _RunSource(FrameSource):
    def __init__(self, reader: RunReader):
        super().__init__(reader.frame_size)
        self.reader = reader

    def __iter__(self):
        buf = np.zeros(self.frame_size, np.uint8)
        while self.reader.read_into(buf):
            self.frames_read += 1
            yield buf


class _ExpandSource(FrameSource):
    def __init__(self, reader: RunReader, spec: AggSpec):
        super().__init__(reader.frame_size)
        self.reader = reader
        self.spec = spec

    def __iter__(self):
        p = self.frame_size
        raw = np.zeros(p, np.uint8)
        out = np.zeros(p, np.uint8)
        dused = 0
        while self.reader.read_into(raw):
            self.frames_read += 1
            soff = 0
            while True:
                st, soff, dused = K.k_expand(raw, soff, p, out, dused,
                                             self.spec.init_ops)
                if st == K.OUT_FULL:
                    yield out
                    out[:] = 0
                    dused = 0
                    continue
                break
        if dused > 0:
            yield out


class _ListSource(FrameSource):
    def __init__(self, frames, frame_size: int):
        super().__init__(frame_size)
        self._frames = list(frames)
        for f in self._frames:
            if len(f) != frame_size:
                raise InvalidRecord(
                    f"frame of {len(f)} bytes fed to a {frame_size}-byte "
                    f"frame source")

    def __iter__(self):
        for f in self._frames:
            yield f


# ---------------------------------------------------------------------------
# merge scheduling and execution
# ---------------------------------------------------------------------------


def plan_merge_rounds(n_runs: int, fan_in: int) -> list[list[int]]:
    """Schedule merges of runs [0..n_runs) at the given fan-in.

    Returns rounds as lists of input indices; merged outputs get fresh
    indices (n_runs, n_runs+1, ...) and join the back of the queue. While
    more than 2*fan_in-1 runs remain, full-width merges run FIFO; then one
    narrower merge of (remaining - fan_in + 1) trims the queue so the last
    round is exactly fan_in wide.
    """
    if fan_in < 2:
        raise MergeOrderError(f"fan-in must be >= 2, got {fan_in}")
    if n_runs == 0:
        return []
    if n_runs == 1:
        return [[0]]  # a lone run still takes one finalizing pass
    queue = list(range(n_runs))
    rounds: list[list[int]] = []
    nxt = n_runs
    while len(queue) > fan_in:
        z = fan_in if len(queue) > 2 * fan_in - 1 else len(queue) - fan_in + 1
        rounds.append(queue[:z])
        queue = queue[z:] + [nxt]
        nxt += 1
    rounds.append(queue)
    return rounds


class MergeDriver:
    """Runs a merge schedule over spill runs, folding duplicate keys.

    Intermediate rounds write new runs; the final round yields finished
    output frames through `final_frames`. Fan-in input frames plus one
    output frame are taken from the allocator per round.

    fold_intermediate selects whether non-final rounds combine records
    that share a key. Runs cut from a hash table hold one record per
    group, so folding between runs shrinks them; plain sorted runs of
    raw records are left untouched until the final, pipelined pass.
    """

    def __init__(self, alloc: FrameAllocator, spec: AggSpec, fan_in: int,
                 tmp_prefix: str, metrics: Metrics, ctr: np.ndarray,
                 mode: int = ORDER_KEY, n_slots: int = 1, slot_seed: int = 0,
                 fold_intermediate: bool = True):
        self.alloc = alloc
        self.spec = spec
        self.fan_in = fan_in
        self.tmp_prefix = tmp_prefix
        self.metrics = metrics
        self.ctr = ctr
        self.mode = 1 if mode == ORDER_SLOT_KEY else 0
        self.n_slots = n_slots
        self.slot_seed = slot_seed
        self.fold_intermediate = fold_intermediate
        self.rounds_run = 0
        self.final_records = 0  # groups emitted by the finalizing round

    def _merge_round(self, runs: list[RunInfo], finalize: bool):
        """Generator: merges the given runs; yields output frames if
        finalize else returns via StopIteration value (RunInfo)."""
        p = self.alloc.frame_size
        f = len(runs)
        readers = [r.open() for r in runs]
        fid_list = self.alloc.allocate_many(f)
        fids = np.array(fid_list, np.int64)
        offs = np.zeros(f, np.int64)
        slot_ids = np.zeros(f, np.int64)
        exhausted = np.zeros(f, np.uint8)
        tree = np.full(max(f, 1), -1, np.int64)
        cur_key = np.zeros(0x10000, np.uint8)
        cur_meta = np.array([0, 0, 0, -1], np.int64)
        cur_state = np.zeros(self.spec.state_width, np.float64)
        out_fid = self.alloc.allocate()
        spec = self.spec

        for i, rd in enumerate(readers):
            if not rd.read_into(self.alloc.view(int(fids[i]))):
                exhausted[i] = 1
            else:
                self.metrics.frames_read += 1
                self.metrics.frames_read_total += 1

        writer = None
        if not finalize:
            path = f"{self.tmp_prefix}.m{self.rounds_run}"
            writer = RunWriter(path, p, ORDER_SLOT_KEY if self.mode
                               else ORDER_KEY,
                               level=max(r.level for r in runs) + 1)
        emit_before = int(self.ctr[K.CTR_EMIT])

        fold = 1 if (finalize or self.fold_intermediate) else 0
        try:
            while True:
                st, aux = K.k_merge(
                    self.alloc.flat, self.alloc.used, p, fids, offs,
                    slot_ids, exhausted, tree, self.mode, self.n_slots,
                    self.slot_seed, spec.state_width, fold, spec.merge_ops,
                    1 if finalize else 0, spec.finish_ops, spec.finish_src,
                    cur_key, cur_meta, cur_state, out_fid, self.ctr)
                if st == K.NEED_REFILL:
                    w = int(aux)
                    if readers[w].read_into(self.alloc.view(int(fids[w]))):
                        self.metrics.frames_read += 1
                        self.metrics.frames_read_total += 1
                        offs[w] = 0
                    else:
                        exhausted[w] = 1
                    continue
                if st == K.OUT_FULL:
                    frame = self.alloc.view(out_fid)
                    if writer is not None:
                        writer.write_frame(frame)
                        self.metrics.frames_written += 1
                        self.metrics.frames_written_total += 1
                    else:
                        yield frame  # view stays valid until we resume
                    self.alloc.clear_frame(out_fid)
                    continue
                break
            if self.alloc.used[out_fid] > 0:
                frame = self.alloc.view(out_fid)
                if writer is not None:
                    writer.write_frame(frame)
                    self.metrics.frames_written += 1
                    self.metrics.frames_written_total += 1
                else:
                    yield frame
                self.alloc.clear_frame(out_fid)
        finally:
            for rd in readers:
                rd.close()
            self.alloc.release_many(fid_list)
            self.alloc.release(out_fid)
        self.rounds_run += 1
        records = int(self.ctr[K.CTR_EMIT]) - emit_before
        if writer is not None:
            writer.records = records
            writer.close()
            raw = sum(r.raw_records for r in runs)
            self._round_result = RunInfo(
                writer.path, writer.frames, records, writer.order_kind,
                writer.level, raw_records=raw)
        else:
            self.final_records = records
            self._round_result = None

    def final_frames(self, runs: list[RunInfo]):
        """Merge all runs per the schedule; yields final output frames."""
        if not runs:
            return
        live = list(runs)
        rounds = plan_merge_rounds(len(live), self.fan_in)
        pool: list[RunInfo] = list(live)
        for idx, round_inputs in enumerate(rounds):
            inputs = [pool[i] for i in round_inputs]
            last = idx == len(rounds) - 1
            gen = self._merge_round(inputs, finalize=last)
            if last:
                yield from gen
            else:
                for _ in gen:
                    pass
                pool.append(self._round_result)
            for r in inputs:
                r.delete()
