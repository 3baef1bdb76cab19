"""Frames, records, aggregate functions and counters shared by every operator.

Memory is managed as fixed-size frames handed out by a budget-enforcing
allocator; an operator that would exceed its budget gets BudgetExhausted
instead of more memory. Records use a length-prefixed wire format so spill
files round-trip byte-exactly: a 2-byte little-endian key length, the key
bytes, then fixed-width 8-byte little-endian float64 fields. Records never
straddle frame boundaries. A key length of zero marks the end of the used
part of a frame, which is one of the reasons empty keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

DEFAULT_FRAME_SIZE = 32768

KLEN_SIZE = 2
FIELD_SIZE = 8
LINK_SIZE = 8  # chain pointer stored ahead of each group record in a table
SLOT_SIZE = 8  # slot-table entry
MAX_KEY_LEN = 0xFFFF


class AggregationError(Exception):
    """Base class for engine errors."""


class BudgetExhausted(AggregationError):
    """An allocation would exceed the operator's frame budget."""


class FrameFull(AggregationError):
    """A record does not fit into the remaining space of a frame."""


class InvalidRecord(AggregationError):
    """Malformed record, e.g. an empty key."""


class CapacityExceeded(AggregationError):
    """A hash-table destination ran out of space mid-operation."""


class InvalidBudget(AggregationError):
    """The memory budget is too small for the requested algorithm."""


class MergeOrderError(AggregationError):
    """A run violated the sort order its header promised."""


class SpecError(AggregationError):
    """Invalid dataset or experiment specification."""


class ModelDomainError(AggregationError):
    """Cost-model arguments outside the closed form's domain."""


# ---------------------------------------------------------------------------
# Aggregate functions
# ---------------------------------------------------------------------------

# Per-state-field opcodes shared with the kernels. Initialization happens once
# at ingestion (payload -> state), after which combining any two records of
# the same key is a pure per-field merge.
INIT_COPY = 0  # state field starts as the payload value
INIT_ONE = 1  # state field starts as 1.0

MERGE_ADD = 0
MERGE_MIN = 1
MERGE_MAX = 2

FINISH_FIRST = 0  # result = first state field
FINISH_DIV = 1  # result = field[0] / field[1]


@dataclass(frozen=True)
class AggregateFunction:
    """A bounded-state aggregate: init/step/merge plus a finish projection."""

    name: str
    state_fields: int
    init_ops: tuple[int, ...]
    merge_ops: tuple[int, ...]
    finish_op: int

    def init(self, payload: float) -> tuple[float, ...]:
        return tuple(payload if op == INIT_COPY else 1.0 for op in self.init_ops)

    def merge(self, a: tuple[float, ...], b: tuple[float, ...]) -> tuple[float, ...]:
        out = []
        for op, x, y in zip(self.merge_ops, a, b):
            if op == MERGE_ADD:
                out.append(x + y)
            elif op == MERGE_MIN:
                out.append(min(x, y))
            else:
                out.append(max(x, y))
        return tuple(out)

    def step(self, state: tuple[float, ...], payload: float) -> tuple[float, ...]:
        return self.merge(state, self.init(payload))

    def finish(self, state: tuple[float, ...]) -> float:
        if self.finish_op == FINISH_DIV:
            return state[0] / state[1]
        return state[0]


AGGREGATES = {
    "sum": AggregateFunction("sum", 1, (INIT_COPY,), (MERGE_ADD,), FINISH_FIRST),
    "count": AggregateFunction("count", 1, (INIT_ONE,), (MERGE_ADD,), FINISH_FIRST),
    "avg": AggregateFunction(
        "avg", 2, (INIT_COPY, INIT_ONE), (MERGE_ADD, MERGE_ADD), FINISH_DIV
    ),
    "min": AggregateFunction("min", 1, (INIT_COPY,), (MERGE_MIN,), FINISH_FIRST),
    "max": AggregateFunction("max", 1, (INIT_COPY,), (MERGE_MAX,), FINISH_FIRST),
}


class AggSpec:
    """One or more aggregate functions evaluated together over the same key.

    State fields of all functions are laid out consecutively in each record;
    the kernel-facing arrays describe how to initialize, merge and finish
    them without any Python callbacks.
    """

    def __init__(self, fns: tuple[AggregateFunction, ...]):
        if not fns:
            raise SpecError("at least one aggregate function required")
        self.fns = fns
        self.state_width = sum(f.state_fields for f in fns)
        self.init_ops = np.array(
            [op for f in fns for op in f.init_ops], dtype=np.int8
        )
        self.merge_ops = np.array(
            [op for f in fns for op in f.merge_ops], dtype=np.int8
        )
        offs, o = [], 0
        for f in fns:
            offs.append(o)
            o += f.state_fields
        self.finish_ops = np.array([f.finish_op for f in fns], dtype=np.int8)
        self.finish_src = np.array(offs, dtype=np.int8)

    @classmethod
    def from_names(cls, names: str | list[str]) -> "AggSpec":
        if isinstance(names, str):
            names = [s.strip() for s in names.split(",") if s.strip()]
        try:
            return cls(tuple(AGGREGATES[n] for n in names))
        except KeyError as e:
            raise SpecError(f"unknown aggregate function {e.args[0]!r}") from None

    @property
    def out_width(self) -> int:
        return len(self.fns)

    def init(self, payload: float) -> tuple[float, ...]:
        out: tuple[float, ...] = ()
        for f in self.fns:
            out = out + f.init(payload)
        return out

    def merge(self, a: tuple[float, ...], b: tuple[float, ...]) -> tuple[float, ...]:
        out: tuple[float, ...] = ()
        o = 0
        for f in self.fns:
            out = out + f.merge(a[o : o + f.state_fields], b[o : o + f.state_fields])
            o += f.state_fields
        return out

    def finish(self, state: tuple[float, ...]) -> tuple[float, ...]:
        out = []
        o = 0
        for f in self.fns:
            out.append(f.finish(state[o : o + f.state_fields]))
            o += f.state_fields
        return tuple(out)


# ---------------------------------------------------------------------------
# Record codec
# ---------------------------------------------------------------------------


def record_nbytes(key: bytes, nfields: int) -> int:
    return KLEN_SIZE + len(key) + FIELD_SIZE * nfields


def serialize_record(buf: np.ndarray, used: int, key: bytes, fields) -> int:
    """Append one record at offset `used`; returns the new used size.

    Raises InvalidRecord for an empty or oversized key and FrameFull when the
    record does not fit. The caller must hand in a zero-padded buffer so the
    implicit zero key-length sentinel stays valid.
    """
    klen = len(key)
    if klen == 0:
        raise InvalidRecord("empty keys are not allowed")
    if klen > MAX_KEY_LEN:
        raise InvalidRecord("key longer than 65535 bytes")
    need = KLEN_SIZE + klen + FIELD_SIZE * len(fields)
    if used + need > buf.size:
        raise FrameFull(f"record of {need} bytes does not fit at offset {used}")
    buf[used] = klen & 0xFF
    buf[used + 1] = (klen >> 8) & 0xFF
    kb = np.frombuffer(key, dtype=np.uint8)
    buf[used + 2 : used + 2 + klen] = kb
    fo = used + 2 + klen
    buf[fo : fo + FIELD_SIZE * len(fields)].view(np.float64)[:] = fields
    return used + need


def deserialize_record(buf: np.ndarray, off: int, nfields: int):
    """Read one record at `off`; returns ((key, fields), next_off) or None.

    None means the zero-length sentinel (or the frame edge) was reached.
    """
    if off > buf.size - KLEN_SIZE:
        return None
    klen = int(buf[off]) | (int(buf[off + 1]) << 8)
    if klen == 0:
        return None
    ko = off + KLEN_SIZE
    fo = ko + klen
    end = fo + FIELD_SIZE * nfields
    if end > buf.size:
        raise InvalidRecord("record overruns frame boundary")
    key = bytes(buf[ko:fo].tobytes())
    flds = tuple(float(v) for v in buf[fo:end].view(np.float64))
    return (key, flds), end


def iter_records(buf: np.ndarray, nfields: int):
    off = 0
    while True:
        got = deserialize_record(buf, off, nfields)
        if got is None:
            return
        rec, off = got
        yield rec


def frames_from_records(records, nfields: int, frame_size: int = DEFAULT_FRAME_SIZE):
    """Pack (key, fields) pairs into a list of zeroed frames (test helper)."""
    frames: list[np.ndarray] = []
    cur = np.zeros(frame_size, np.uint8)
    used = 0
    for key, flds in records:
        try:
            used = serialize_record(cur, used, key, flds)
        except FrameFull:
            frames.append(cur)
            cur = np.zeros(frame_size, np.uint8)
            used = serialize_record(cur, 0, key, flds)
    if used:
        frames.append(cur)
    return frames


# ---------------------------------------------------------------------------
# Frame allocator
# ---------------------------------------------------------------------------


class FrameAllocator:
    """Pool of `budget` fixed-size frames with a hard budget and a high-water mark.

    Frames are referenced by integer id; kernels address the whole pool
    through the flat view plus fid * frame_size offsets.
    """

    def __init__(self, budget: int, frame_size: int = DEFAULT_FRAME_SIZE):
        if budget < 1:
            raise InvalidBudget("budget must be at least 1 frame")
        if frame_size < 64:
            raise SpecError("frame size too small")
        self.budget = budget
        self.frame_size = frame_size
        self.pool = np.zeros((budget, frame_size), np.uint8)
        self.flat = self.pool.reshape(-1)
        self.used = np.zeros(budget, np.int64)
        self._free = list(range(budget - 1, -1, -1))
        self.high_water = 0

    @property
    def outstanding(self) -> int:
        return self.budget - len(self._free)

    def allocate(self) -> int:
        if not self._free:
            raise BudgetExhausted(f"budget of {self.budget} frames exhausted")
        fid = self._free.pop()
        self.pool[fid, :] = 0
        self.used[fid] = 0
        if self.outstanding > self.high_water:
            self.high_water = self.outstanding
        return fid

    def allocate_many(self, n: int) -> list[int]:
        if n > len(self._free):
            raise BudgetExhausted(
                f"requested {n} frames with only {len(self._free)} of "
                f"{self.budget} available"
            )
        return [self.allocate() for _ in range(n)]

    def release(self, fid: int) -> None:
        self._free.append(fid)

    def release_many(self, fids) -> None:
        for fid in fids:
            self.release(fid)

    def clear_frame(self, fid: int) -> None:
        self.pool[fid, :] = 0
        self.used[fid] = 0

    def view(self, fid: int) -> np.ndarray:
        return self.pool[fid]

    @property
    def free_count(self) -> int:
        return len(self._free)


# ---------------------------------------------------------------------------
# Counters and dataset statistics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    """Deterministic counters plus wall-clock timings for one operator run.

    comparisons counts ordering/hash-chain comparisons (the modeled quantity);
    group_compares counts the pipelined-fold equality checks, kept separate.
    frames_written / frames_read are model-comparable: they exclude the
    initial input scan and the final-output flush. The *_total twins include
    everything.
    """

    comparisons: int = 0
    group_compares: int = 0
    frames_written: int = 0
    frames_read: int = 0
    frames_written_total: int = 0
    frames_read_total: int = 0
    output_groups: int = 0
    time_to_first_result: float = 0.0
    total_time: float = 0.0
    spilled_partitions: int = 0
    fallbacks: int = 0
    grace_levels: int = 0
    recursion_depth: int = 0
    high_water: int = 0

    def merge_from(self, other: "Metrics") -> None:
        self.comparisons += other.comparisons
        self.group_compares += other.group_compares
        self.frames_written += other.frames_written
        self.frames_read += other.frames_read
        self.frames_written_total += other.frames_written_total
        self.frames_read_total += other.frames_read_total
        self.output_groups += other.output_groups
        self.spilled_partitions += other.spilled_partitions
        self.fallbacks += other.fallbacks
        self.grace_levels = max(self.grace_levels, other.grace_levels)
        self.recursion_depth = max(self.recursion_depth, other.recursion_depth)
        self.high_water = max(self.high_water, other.high_water)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


@dataclass
class DatasetStats:
    """Input sizes used by planning and the cost models.

    R / G are frame counts (real-valued), R_t / G_t are record / group counts.
    """

    R: float
    R_t: float
    G: float
    G_t: float

    def __post_init__(self):
        if self.R_t < 0 or self.G_t < 0 or self.G_t > self.R_t + 1e-9:
            raise SpecError("need 0 <= G_t <= R_t")
        if self.R < 0 or self.G < 0:
            raise SpecError("frame counts must be nonnegative")

    def scaled(self, ratio: float) -> "DatasetStats":
        return DatasetStats(
            R=self.R * ratio, R_t=self.R_t * ratio, G=self.G * ratio, G_t=self.G_t * ratio
        )


def stats_for(n_records: float, n_groups: float, record_bytes: float,
              group_bytes: float, frame_size: int = DEFAULT_FRAME_SIZE) -> DatasetStats:
    """Build DatasetStats from record/group counts and byte widths."""
    per_frame_r = max(1.0, math.floor(frame_size / record_bytes))
    per_frame_g = max(1.0, math.floor(frame_size / group_bytes))
    return DatasetStats(
        R=n_records / per_frame_r,
        R_t=float(n_records),
        G=n_groups / per_frame_g,
        G_t=float(n_groups),
    )
