"""Frame-backed chained hash table with optional per-slot bloom bytes.

Groups live inside allocator frames as [link int64][klen u16][key][states];
the slot array holds absolute pool addresses. Slot-array and bloom memory is
charged against the frame budget by allocating placeholder frames, so an
operator's allocator high-water mark reflects everything the table costs.
"""

from __future__ import annotations

import math

import numpy as np

from aggbench import _kernels as K
from aggbench.core import (
    CapacityExceeded,
    FIELD_SIZE,
    FrameAllocator,
    KLEN_SIZE,
    LINK_SIZE,
    SLOT_SIZE,
)

BLOOM_BYTE = 1  # one filter byte per slot

# minimum key a stored group can have; bounds the flush scratch array
_MIN_KEY = 1


def plan_table(n_frames: int, frame_size: int, group_bytes: float,
               slot_ratio: float = 1.0, bloom: bool = False) -> tuple[int, int]:
    """Size a table that must fit in n_frames: (capacity_hint, n_slots).

    Each group costs its stored bytes (payload + link) plus slot_ratio
    slot entries (8 bytes each, +1 bloom byte when enabled). The capacity
    hint is what the planner expects to fit; physical fullness still rules.
    """
    if n_frames < 2:
        raise CapacityExceeded(f"table needs at least 2 frames, got {n_frames}")
    per_group = group_bytes + LINK_SIZE + slot_ratio * (
        SLOT_SIZE + (BLOOM_BYTE if bloom else 0))
    cap = int(n_frames * frame_size / per_group)
    n_slots = max(1, math.ceil(slot_ratio * cap))
    return cap, n_slots


class ChainedHashTable:
    """insert-or-aggregate table spanning a fixed set of frames."""

    def __init__(self, alloc: FrameAllocator, state_width: int, n_frames: int,
                 n_slots: int, seed: int = 0, bloom: bool = False):
        p = alloc.frame_size
        overhead = math.ceil(
            (SLOT_SIZE * n_slots + (BLOOM_BYTE * n_slots if bloom else 0)) / p)
        if n_frames - overhead < 1:
            raise CapacityExceeded(
                f"{n_slots} slots need {overhead} frames of overhead, "
                f"leaving no storage out of {n_frames}")
        self.alloc = alloc
        self.p = p
        self.state_width = state_width
        self.seed = seed
        self.n_slots = n_slots
        self.has_bloom = bloom
        self._overhead_fids = alloc.allocate_many(overhead)
        self._storage_fids = alloc.allocate_many(n_frames - overhead)
        self.tfids = np.array(self._storage_fids, np.int64)
        self.tmeta = np.zeros(2, np.int64)
        self.slots = np.full(n_slots, -1, np.int64)
        self.bloom = np.zeros(n_slots if bloom else 1, np.uint8)
        self.stored_groups = 0
        # absolute bound on one chain's length: every group in one slot
        min_group = LINK_SIZE + KLEN_SIZE + _MIN_KEY + FIELD_SIZE * state_width
        self._scratch = np.empty(
            len(self._storage_fids) * (p // min_group) + 1, np.int64)
        self._flush_meta = np.array([-1, 0, -1], np.int64)

    @property
    def storage_frames(self) -> int:
        return len(self._storage_fids)

    @property
    def overhead_frames(self) -> int:
        return len(self._overhead_fids)

    @property
    def occupied_slots(self) -> int:
        return int((self.slots != -1).sum())

    def insert_frame(self, src: np.ndarray, soff: int, merge_ops: np.ndarray,
                     ctr: np.ndarray) -> tuple[int, int]:
        """Insert-or-aggregate every record in src from soff onward.

        Returns (status, soff); TABLE_FULL leaves soff at the record that
        did not fit so the caller can spill and retry.
        """
        before = int(ctr[K.CTR_INS])
        st, soff = K.k_table_insert(
            self.alloc.flat, self.alloc.used, self.p, self.slots,
            self.n_slots, self.seed, self.bloom,
            1 if self.has_bloom else 0, self.tfids, len(self.tfids),
            self.tmeta, src, soff, merge_ops, ctr)
        self.stored_groups += int(ctr[K.CTR_INS]) - before
        return int(st), int(soff)

    def probe(self, key: bytes, ctr: np.ndarray):
        """Membership probe; returns the state tuple or None."""
        kb = np.frombuffer(key, np.uint8)
        passed, addr = K.k_probe_lookup(
            self.alloc.flat, self.slots, self.n_slots, self.seed, self.bloom,
            1 if self.has_bloom else 0, kb, 0, len(key), ctr)
        if addr == -1:
            return None
        fo = int(addr) + LINK_SIZE + KLEN_SIZE + len(key)
        return tuple(
            self.alloc.flat[fo + j * FIELD_SIZE:
                            fo + (j + 1) * FIELD_SIZE].view(np.float64)[0]
            for j in range(self.state_width))

    def flush_reset(self) -> None:
        self._flush_meta[:] = (-1, 0, -1)

    def flush_step(self, out_fid: int, ctr: np.ndarray, *, sort: bool,
                   finalize: bool, finish_ops: np.ndarray,
                   finish_src: np.ndarray, sort_seed: int = 0,
                   slot_lo: int = 0, slot_hi: int | None = None) -> int:
        """Emit groups into out_fid until done or the frame fills.

        Call flush_reset() first, then repeat with fresh frames while the
        status is OUT_FULL.
        """
        hi = self.n_slots if slot_hi is None else slot_hi
        return int(K.k_flush_slots(
            self.alloc.flat, self.alloc.used, self.p, self.slots, slot_lo,
            hi, self._flush_meta, out_fid, self.state_width,
            1 if finalize else 0, finish_ops, finish_src, 1 if sort else 0,
            self._scratch, sort_seed, ctr))

    def iter_groups(self):
        """Decode (key, states) pairs in slot-chain order (tests only)."""
        flat = self.alloc.flat
        for s in range(self.n_slots):
            addr = int(self.slots[s])
            while addr != -1:
                rec = addr + LINK_SIZE
                klen = int(flat[rec]) | (int(flat[rec + 1]) << 8)
                key = bytes(flat[rec + KLEN_SIZE: rec + KLEN_SIZE + klen])
                fo = rec + KLEN_SIZE + klen
                states = tuple(
                    flat[fo + j * FIELD_SIZE:
                         fo + (j + 1) * FIELD_SIZE].view(np.float64)[0]
                    for j in range(self.state_width))
                yield key, states
                addr = int(
                    flat[addr:addr + LINK_SIZE].view(np.int64)[0])

    def clear(self) -> None:
        """Empty the table, keeping its frames."""
        self.slots[:] = -1
        self.bloom[:] = 0
        self.tmeta[:] = 0
        self.stored_groups = 0
        for fid in self._storage_fids:
            self.alloc.clear_frame(fid)

    def close(self) -> None:
        self.alloc.release_many(self._overhead_fids)
        self.alloc.release_many(self._storage_fids)
        self._overhead_fids = []
        self._storage_fids = []
