"""Hot kernels: hashing, table inserts, per-slot sorts, loser-tree merges.

Every function here is numba @njit-compiled by default and runs as plain
Python when AGGBENCH_NO_NUMBA=1; both paths are bit-identical. Kernels work
on the allocator's flat uint8 pool plus explicit frame ids / offsets, loop
until they need the caller (frame full, table full, refill, first emit) and
return small status tuples so all file I/O and budget bookkeeping stays in
Python.

Arithmetic rules that keep the two backends identical: all hash math is
masked 32-bit (every intermediate fits int64, since numba treats signed
int64 overflow as undefined), and float64 state fields are accessed through
8-byte slice views so byte layout is authoritative.
"""

from __future__ import annotations

import numpy as np

from aggbench._jit import njit

# record layout constants (keep in sync with core)
KLEN_SIZE = 2
FIELD_SIZE = 8
LINK_SIZE = 8

M32 = 0xFFFFFFFF
HASH_SPACE = 1 << 32  # partition cutoffs live in [0, 2^32)

# merge opcodes (match core.MERGE_*)
MERGE_ADD = 0
MERGE_MIN = 1
MERGE_MAX = 2
INIT_COPY = 0
INIT_ONE = 1
FINISH_FIRST = 0
FINISH_DIV = 1

# kernel statuses
OK_DONE = 0
TABLE_FULL = 1
OUT_FULL = 2
NEED_FRAME = 3
NEED_REFILL = 4
FIRST_SPILL = 5
FIRST_EMIT = 6
ADDR_FULL = 7
LOAD_FULL = 8
ORDER_ERR = 9
DST_FULL = 10

# counter indices (ctr is a reusable int64 scratch array)
CTR_CMP = 0  # ordering / hash-chain comparisons (the modeled count)
CTR_GCMP = 1  # pipelined-fold equality checks
CTR_EMIT = 2  # groups emitted to an output frame
CTR_INS = 3  # new groups inserted
CTR_AGG = 4  # records folded into an existing group
CTR_OCC = 5  # slots that became occupied
CTR_RECS = 6  # records consumed from a source frame
CTR_BLOOM_PASS = 7  # probes the bloom byte let through
CTR_PROBES = 8  # stage-2 probes
CTR_SPILL = 9  # records routed to a spill buffer
N_CTR = 12


# ---------------------------------------------------------------------------
# primitive helpers
# ---------------------------------------------------------------------------


@njit(inline="always")
def _u16(buf, off):
    return np.int64(buf[off]) | (np.int64(buf[off + 1]) << 8)


@njit(inline="always")
def _put_u16(buf, off, v):
    buf[off] = v & 0xFF
    buf[off + 1] = (v >> 8) & 0xFF


@njit(inline="always")
def _get_f64(buf, off):
    return buf[off : off + 8].view(np.float64)[0]


@njit(inline="always")
def _put_f64(buf, off, v):
    buf[off : off + 8].view(np.float64)[0] = v


@njit(inline="always")
def _get_i64(buf, off):
    return buf[off : off + 8].view(np.int64)[0]


@njit(inline="always")
def _put_i64(buf, off, v):
    buf[off : off + 8].view(np.int64)[0] = v


@njit(inline="always")
def hash_bytes(buf, off, length, seed):
    """Masked 32-bit FNV-1a with a double xor-multiply finalizer."""
    h = (np.int64(0x811C9DC5) ^ (np.int64(seed) & M32)) & M32
    for i in range(length):
        h = ((h ^ np.int64(buf[off + i])) * 0x01000193) & M32
    h = ((h ^ (h >> 16)) * 0x045D9F3B) & M32
    h = ((h ^ (h >> 16)) * 0x045D9F3B) & M32
    return (h ^ (h >> 16)) & M32


def mix_seed(seed: int, salt: int) -> int:
    """Derive an independent hash stream (plain Python, planning-time only)."""
    h = (seed * 2654435761 + salt * 40503 + 0x9E37) & M32
    h = ((h ^ (h >> 15)) * 2246822519) & M32
    h = ((h ^ (h >> 13)) * 3266489917) & M32
    return (h ^ (h >> 16)) & M32


@njit(inline="always")
def _key_cmp(a, ao, alen, b, bo, blen):
    n = alen if alen < blen else blen
    for i in range(n):
        ca = a[ao + i]
        cb = b[bo + i]
        if ca != cb:
            return -1 if ca < cb else 1
    if alen == blen:
        return 0
    return -1 if alen < blen else 1


@njit(inline="always")
def _part_of(u, cuts):
    # cuts is ascending with cuts[-1] == 2^32; returns first i with u < cuts[i]
    lo = 0
    hi = cuts.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cuts[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(inline="always")
def _merge_fields(dst, doff, src, soff, merge_ops):
    for j in range(merge_ops.shape[0]):
        a = _get_f64(dst, doff + j * FIELD_SIZE)
        b = _get_f64(src, soff + j * FIELD_SIZE)
        op = merge_ops[j]
        if op == MERGE_ADD:
            _put_f64(dst, doff + j * FIELD_SIZE, a + b)
        elif op == MERGE_MIN:
            _put_f64(dst, doff + j * FIELD_SIZE, a if a < b else b)
        else:
            _put_f64(dst, doff + j * FIELD_SIZE, a if a > b else b)


@njit(inline="always")
def _merge_state(state, src, soff, merge_ops):
    for j in range(merge_ops.shape[0]):
        b = _get_f64(src, soff + j * FIELD_SIZE)
        op = merge_ops[j]
        if op == MERGE_ADD:
            state[j] = state[j] + b
        elif op == MERGE_MIN:
            state[j] = state[j] if state[j] < b else b
        else:
            state[j] = state[j] if state[j] > b else b


@njit(inline="always")
def _emit_group(pool, used, p, out_fid, key, klen, state, nf,
                finalize, finish_ops, finish_src):
    """Append the running group (key scratch + float64 state) to a frame."""
    width = finish_ops.shape[0] if finalize else nf
    need = KLEN_SIZE + klen + FIELD_SIZE * width
    u = used[out_fid]
    if u + need > p:
        return False
    base = out_fid * p + u
    _put_u16(pool, base, klen)
    for i in range(klen):
        pool[base + KLEN_SIZE + i] = key[i]
    fo = base + KLEN_SIZE + klen
    if finalize:
        for j in range(width):
            s = np.int64(finish_src[j])
            v = state[s]
            if finish_ops[j] == FINISH_DIV:
                v = v / state[s + 1]
            _put_f64(pool, fo + j * FIELD_SIZE, v)
    else:
        for j in range(nf):
            _put_f64(pool, fo + j * FIELD_SIZE, state[j])
    used[out_fid] = u + need
    return True


@njit(inline="always")
def _emit_record(pool, used, p, out_fid, src, koff, klen, foff, nf,
                 finalize, finish_ops, finish_src):
    """Append (key, states|finished) to an output frame; False if no fit."""
    width = finish_ops.shape[0] if finalize else nf
    need = KLEN_SIZE + klen + FIELD_SIZE * width
    u = used[out_fid]
    if u + need > p:
        return False
    base = out_fid * p + u
    _put_u16(pool, base, klen)
    for i in range(klen):
        pool[base + KLEN_SIZE + i] = src[koff + i]
    fo = base + KLEN_SIZE + klen
    if finalize:
        for j in range(width):
            s = np.int64(finish_src[j]) * FIELD_SIZE
            v = _get_f64(src, foff + s)
            if finish_ops[j] == FINISH_DIV:
                v = v / _get_f64(src, foff + s + FIELD_SIZE)
            _put_f64(pool, fo + j * FIELD_SIZE, v)
    else:
        for j in range(nf):
            _put_f64(pool, fo + j * FIELD_SIZE,
                     _get_f64(src, foff + j * FIELD_SIZE))
    used[out_fid] = u + need
    return True


# ---------------------------------------------------------------------------
# ingestion helpers
# ---------------------------------------------------------------------------


@njit
def k_expand(src, soff, p, dst, dused, init_ops):
    """Rewrite raw (key, payload) records as (key, state...) records.

    Returns (status, soff, dused); status OUT_FULL means dst filled up.
    """
    nf = init_ops.shape[0]
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff, dused
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff, dused
        need = KLEN_SIZE + klen + FIELD_SIZE * nf
        if dused + need > p:
            return OUT_FULL, soff, dused
        payload = _get_f64(src, soff + KLEN_SIZE + klen)
        _put_u16(dst, dused, klen)
        for i in range(klen):
            dst[dused + KLEN_SIZE + i] = src[soff + KLEN_SIZE + i]
        fo = dused + KLEN_SIZE + klen
        for j in range(nf):
            if init_ops[j] == INIT_COPY:
                _put_f64(dst, fo + j * FIELD_SIZE, payload)
            else:
                _put_f64(dst, fo + j * FIELD_SIZE, 1.0)
        dused += need
        soff += KLEN_SIZE + klen + FIELD_SIZE


@njit
def k_pack(keys_flat, key_offs, payloads, order, start, frame, p):
    """Pack raw records order[start:] into one zeroed frame.

    Each record is (key bytes, one float64 payload). Returns (next_index,
    used_bytes); next_index == order.shape[0] means the input is exhausted.
    """
    used = 0
    i = start
    n = order.shape[0]
    while i < n:
        rid = order[i]
        ko = key_offs[rid]
        klen = key_offs[rid + 1] - ko
        need = KLEN_SIZE + klen + FIELD_SIZE
        if used + need > p:
            break
        _put_u16(frame, used, klen)
        for b in range(klen):
            frame[used + KLEN_SIZE + b] = keys_flat[ko + b]
        _put_f64(frame, used + KLEN_SIZE + klen, payloads[rid])
        used += need
        i += 1
    return i, used


# ---------------------------------------------------------------------------
# chained hash table
# ---------------------------------------------------------------------------


@njit(inline="always")
def _chain_find(pool, slots, s, key_src, koff, klen, ctr):
    """Walk slot s comparing keys; returns record addr or -1."""
    addr = slots[s]
    while addr != -1:
        rec = addr + LINK_SIZE
        rklen = _u16(pool, rec)
        ctr[CTR_CMP] += 1
        if _key_cmp(pool, rec + KLEN_SIZE, rklen, key_src, koff, klen) == 0:
            return addr
        addr = _get_i64(pool, addr)
    return -1


@njit(inline="always")
def _table_append(pool, used, p, tfids, ntf, tmeta, slots, s,
                  key_src, koff, klen, field_src, foff, nf):
    """Insert a new group at the head of slot s; False when the table is full."""
    need = LINK_SIZE + KLEN_SIZE + klen + FIELD_SIZE * nf
    cur = tmeta[0]
    fid = tfids[cur]
    if used[fid] + need > p:
        # advance the tail, then first-fit over earlier partials
        placed = False
        while cur + 1 < ntf:
            cur += 1
            fid = tfids[cur]
            if used[fid] + need <= p:
                tmeta[0] = cur
                placed = True
                break
        if not placed:
            fid = -1
            for i in range(ntf):
                cand = tfids[i]
                if used[cand] + need <= p:
                    fid = cand
                    break
            if fid == -1:
                return False
    base = fid * p + used[fid]
    _put_i64(pool, base, slots[s])
    rec = base + LINK_SIZE
    _put_u16(pool, rec, klen)
    for i in range(klen):
        pool[rec + KLEN_SIZE + i] = key_src[koff + i]
    fo = rec + KLEN_SIZE + klen
    for j in range(nf):
        _put_f64(pool, fo + j * FIELD_SIZE,
                 _get_f64(field_src, foff + j * FIELD_SIZE))
    used[fid] = base + need - fid * p
    slots[s] = base
    return True


@njit
def k_table_insert(pool, used, p, slots, H, slot_seed,
                   bloom, bloom_on,
                   tfids, ntf, tmeta,
                   src, soff, merge_ops, ctr):
    """insert_or_aggregate for every record in src starting at soff.

    Returns (status, soff). TABLE_FULL leaves soff at the offending record.
    """
    nf = merge_ops.shape[0]
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff
        koff = soff + KLEN_SIZE
        foff = koff + klen
        u = hash_bytes(src, koff, klen, slot_seed)
        s = u % H
        addr = _chain_find(pool, slots, s, src, koff, klen, ctr)
        if addr != -1:
            _merge_fields(pool, addr + LINK_SIZE + KLEN_SIZE + klen, src, foff,
                          merge_ops)
            ctr[CTR_AGG] += 1
        else:
            if slots[s] == -1:
                newslot = 1
            else:
                newslot = 0
            if not _table_append(pool, used, p, tfids, ntf, tmeta, slots, s,
                                 src, koff, klen, src, foff, nf):
                return TABLE_FULL, soff
            ctr[CTR_INS] += 1
            ctr[CTR_OCC] += newslot
            if bloom_on:
                hb = ((u ^ (u >> 7)) * 0x2545F491) & M32
                bloom[s] |= np.uint8((1 << (hb & 7)) | (1 << ((hb >> 13) & 7)))
        ctr[CTR_RECS] += 1
        soff = foff + FIELD_SIZE * nf


@njit
def k_gather_slot(pool, slots, s, scratch):
    """Collect record addresses (past the link) of slot s; returns count."""
    n = 0
    addr = slots[s]
    while addr != -1:
        scratch[n] = addr + LINK_SIZE
        n += 1
        addr = _get_i64(pool, addr)
    return n


@njit
def _addr_key_cmp(pool, a, b):
    al = _u16(pool, a)
    bl = _u16(pool, b)
    return _key_cmp(pool, a + KLEN_SIZE, al, pool, b + KLEN_SIZE, bl)


@njit
def k_quicksort_addrs(pool, addrs, lo, hi, seed, ctr):
    """Three-way quicksort of record addresses by key bytes, counting compares.

    Random pivots from a seeded xorshift; equal keys are grouped in one pass,
    so duplicate-heavy inputs cost about one pass per distinct value.
    """
    state = (seed | 1) & M32
    stack = np.empty(128, np.int64)
    top = 0
    while True:
        while hi - lo > 1:
            state ^= (state << 13) & M32
            state ^= state >> 17
            state ^= (state << 5) & M32
            pidx = lo + state % (hi - lo)
            pivot = addrs[pidx]
            addrs[pidx] = addrs[lo]
            addrs[lo] = pivot
            lt = lo
            gt = hi
            i = lo + 1
            while i < gt:
                c = _addr_key_cmp(pool, addrs[i], pivot)
                ctr[CTR_CMP] += 1
                if c < 0:
                    t2 = addrs[i]
                    addrs[i] = addrs[lt]
                    addrs[lt] = t2
                    lt += 1
                    i += 1
                elif c > 0:
                    gt -= 1
                    t2 = addrs[i]
                    addrs[i] = addrs[gt]
                    addrs[gt] = t2
                else:
                    i += 1
            # [lo, lt) < pivot block [lt, gt) equal, [gt, hi) greater
            if lt - lo >= hi - gt:
                # loop on the larger (left), push the smaller (right)
                if hi - gt > 1:
                    stack[top] = gt
                    stack[top + 1] = hi
                    top += 2
                hi = lt
            else:
                if lt - lo > 1:
                    stack[top] = lo
                    stack[top + 1] = lt
                    top += 2
                lo = gt
        if top == 0:
            return
        top -= 2
        lo = stack[top]
        hi = stack[top + 1]


@njit
def k_flush_slots(pool, used, p, slots, slot_lo, slot_hi, meta,
                  out_fid, nf, finalize, finish_ops, finish_src,
                  sort_mode, scratch, sort_seed, ctr):
    """Emit groups of slots [slot_lo, slot_hi) into an output frame.

    meta = [cur_slot, pos, chain_len] carries resume state across calls:
    pos indexes into scratch (the gathered, optionally sorted chain) and
    chain_len < 0 means the current slot still needs gathering. Returns
    OUT_FULL or OK_DONE.
    """
    s = meta[0]
    if s < slot_lo:
        s = slot_lo
        meta[1] = 0
        meta[2] = -1
    while s < slot_hi:
        if slots[s] == -1:
            s += 1
            meta[0] = s
            meta[1] = 0
            meta[2] = -1
            continue
        if meta[2] < 0:
            n = k_gather_slot(pool, slots, s, scratch)
            if sort_mode and n > 1:
                k_quicksort_addrs(pool, scratch, 0, n, (sort_seed + s) & M32, ctr)
            meta[2] = n
            meta[1] = 0
        n = meta[2]
        i = meta[1]
        while i < n:
            rec = scratch[i]
            klen = _u16(pool, rec)
            if not _emit_record(pool, used, p, out_fid, pool, rec + KLEN_SIZE,
                                klen, rec + KLEN_SIZE + klen, nf,
                                finalize, finish_ops, finish_src):
                meta[0] = s
                meta[1] = i
                return OUT_FULL
            i += 1
            ctr[CTR_EMIT] += 1
        s += 1
        meta[0] = s
        meta[1] = 0
        meta[2] = -1
    return OK_DONE


@njit
def k_probe_lookup(pool, slots, H, slot_seed, bloom, bloom_on,
                   key_src, koff, klen, ctr):
    """Membership probe for one key: (bloom_pass, rec_addr)."""
    u = hash_bytes(key_src, koff, klen, slot_seed)
    s = u % H
    ctr[CTR_PROBES] += 1
    if bloom_on:
        hb = ((u ^ (u >> 7)) * 0x2545F491) & M32
        mask = np.uint8((1 << (hb & 7)) | (1 << ((hb >> 13) & 7)))
        if (bloom[s] & mask) != mask:
            return 0, np.int64(-1)
    ctr[CTR_BLOOM_PASS] += 1
    addr = _chain_find(pool, slots, s, key_src, koff, klen, ctr)
    return 1, addr


# ---------------------------------------------------------------------------
# sort path
# ---------------------------------------------------------------------------


@njit
def k_sort_load(pool, used, p, src, soff, lfids, nload, lmeta,
                addrs, naddr, nf, ctr):
    """Copy records into load frames, collecting their addresses.

    Returns (status, soff, naddr): LOAD_FULL when no load frame fits the next
    record, ADDR_FULL when the address array must grow.
    """
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff, naddr
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff, naddr
        need = KLEN_SIZE + klen + FIELD_SIZE * nf
        if naddr >= addrs.shape[0]:
            return ADDR_FULL, soff, naddr
        cur = lmeta[0]
        fid = lfids[cur]
        if used[fid] + need > p:
            placed = False
            while cur + 1 < nload:
                cur += 1
                fid = lfids[cur]
                if used[fid] + need <= p:
                    lmeta[0] = cur
                    placed = True
                    break
            if not placed:
                return LOAD_FULL, soff, naddr
        base = fid * p + used[fid]
        for i in range(need):
            pool[base + i] = src[soff + i]
        used[fid] = base + need - fid * p
        addrs[naddr] = base
        naddr += 1
        ctr[CTR_RECS] += 1
        soff += need


@njit
def k_emit_addrs(pool, used, p, addrs, n, meta, out_fid, nf, ctr):
    """Write records addrs[meta[0]:n] to an output frame (no fold)."""
    i = meta[0]
    dummy = np.zeros(1, np.int8)
    while i < n:
        rec = addrs[i]
        klen = _u16(pool, rec)
        if not _emit_record(pool, used, p, out_fid, pool, rec + KLEN_SIZE, klen,
                            rec + KLEN_SIZE + klen, nf, False, dummy, dummy):
            meta[0] = i
            return OUT_FULL
        i += 1
    meta[0] = i
    return OK_DONE


@njit
def k_fold_sorted(pool, used, p, addrs, n, meta, cur_key, cur_meta, cur_state,
                  out_fid, nf, finalize, finish_ops, finish_src, merge_ops,
                  ctr):
    """Pipelined grouping over already-sorted record addresses.

    cur_* buffers hold the running group between calls. meta[0] is the next
    address index. Emits the trailing group when the input is exhausted.
    """
    i = meta[0]
    while i < n:
        rec = addrs[i]
        klen = _u16(pool, rec)
        ko = rec + KLEN_SIZE
        fo = ko + klen
        if cur_meta[0] == 1:
            ctr[CTR_GCMP] += 1
            if _key_cmp(pool, ko, klen, cur_key, 0, cur_meta[1]) == 0:
                _merge_state(cur_state, pool, fo, merge_ops)
                i += 1
                continue
            if not _emit_group(pool, used, p, out_fid, cur_key, cur_meta[1],
                               cur_state, nf, finalize, finish_ops,
                               finish_src):
                meta[0] = i
                return OUT_FULL
            ctr[CTR_EMIT] += 1
        # start a new running group
        cur_meta[0] = 1
        cur_meta[1] = klen
        for b in range(klen):
            cur_key[b] = pool[ko + b]
        for j in range(nf):
            cur_state[j] = _get_f64(pool, fo + j * FIELD_SIZE)
        i += 1
        meta[0] = i
    meta[0] = i
    return OK_DONE


@njit
def k_fold_finish(pool, used, p, cur_key, cur_meta, cur_state, out_fid, nf,
                  finalize, finish_ops, finish_src, ctr):
    """Emit the trailing running group, if any. OUT_FULL when it won't fit."""
    if cur_meta[0] != 1:
        return OK_DONE
    if not _emit_group(pool, used, p, out_fid, cur_key, cur_meta[1],
                       cur_state, nf, finalize, finish_ops, finish_src):
        return OUT_FULL
    ctr[CTR_EMIT] += 1
    cur_meta[0] = 0
    return OK_DONE


@njit
def k_stream_fold(src, soff, p, used, pool, cur_key, cur_meta, cur_state,
                  out_fid, nf, finalize, finish_ops, finish_src, merge_ops,
                  ctr):
    """Single-scan fold over records that arrive in nondecreasing key order.

    One three-way comparison per record both verifies the order contract and
    decides merge-vs-emit. Returns ORDER_ERR if a key decreases.
    """
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff
        ko = soff + KLEN_SIZE
        fo = ko + klen
        if cur_meta[0] == 1:
            ctr[CTR_CMP] += 1
            c = _key_cmp(src, ko, klen, cur_key, 0, cur_meta[1])
            if c < 0:
                return ORDER_ERR, soff
            if c == 0:
                _merge_state(cur_state, src, fo, merge_ops)
                ctr[CTR_RECS] += 1
                soff = fo + FIELD_SIZE * nf
                continue
            if not _emit_group(pool, used, p, out_fid, cur_key, cur_meta[1],
                               cur_state, nf, finalize, finish_ops,
                               finish_src):
                return OUT_FULL, soff
            ctr[CTR_EMIT] += 1
        cur_meta[0] = 1
        cur_meta[1] = klen
        for b in range(klen):
            cur_key[b] = src[ko + b]
        for j in range(nf):
            cur_state[j] = _get_f64(src, fo + j * FIELD_SIZE)
        ctr[CTR_RECS] += 1
        soff = fo + FIELD_SIZE * nf


# ---------------------------------------------------------------------------
# loser-tree merge
# ---------------------------------------------------------------------------


@njit(inline="always")
def _leaf_beats(pool, p, fids, offs, slot_ids, exhausted, mode, i, j, ctr):
    """True when run i's current record should pop before run j's."""
    if exhausted[i] == 1:
        return False
    if exhausted[j] == 1:
        return True
    ctr[CTR_CMP] += 1
    if mode == 1 and slot_ids[i] != slot_ids[j]:
        return slot_ids[i] < slot_ids[j]
    ai = fids[i] * p + offs[i]
    aj = fids[j] * p + offs[j]
    al = _u16(pool, ai)
    bl = _u16(pool, aj)
    c = _key_cmp(pool, ai + KLEN_SIZE, al, pool, aj + KLEN_SIZE, bl)
    if c != 0:
        return c < 0
    return i < j


@njit(inline="always")
def _replay(pool, p, fids, offs, slot_ids, exhausted, mode, tree, f, leaf, ctr):
    cur = leaf
    node = (f + leaf) >> 1
    while node >= 1:
        if tree[node] != -1 and not _leaf_beats(pool, p, fids, offs, slot_ids,
                                                exhausted, mode, cur,
                                                tree[node], ctr):
            t = tree[node]
            tree[node] = cur
            cur = t
        node >>= 1
    tree[0] = cur


@njit
def k_merge(pool, used, p, fids, offs, slot_ids, exhausted, tree, mode,
            H, slot_seed, nf, fold, merge_ops, finalize, finish_ops,
            finish_src, cur_key, cur_meta, cur_state, out_fid, ctr):
    """Pop records from f runs in order, optionally folding equal keys.

    cur_meta = [group_valid, group_klen, tree_built, pending_leaf]. The
    kernel returns (status, aux): NEED_REFILL(aux=leaf) when a run's load
    frame is drained (the caller refills fids[leaf] or marks it exhausted
    and re-enters), OUT_FULL when the output frame is full, and OK_DONE when
    every run is exhausted and the trailing group has been emitted.
    """
    f = fids.shape[0]

    if cur_meta[2] == 0:
        # initial slot ids, then build the tree by playing each leaf upward
        for i in range(f):
            if exhausted[i] == 0 and mode == 1:
                a = fids[i] * p + offs[i]
                kl = _u16(pool, a)
                slot_ids[i] = hash_bytes(pool, a + KLEN_SIZE, kl, slot_seed) % H
        for i in range(f):
            tree[i] = -1
        for i in range(f):
            cur = i
            node = (f + i) >> 1
            while node >= 1:
                if tree[node] == -1:
                    tree[node] = cur
                    cur = -1
                    break
                if not _leaf_beats(pool, p, fids, offs, slot_ids, exhausted,
                                   mode, cur, tree[node], ctr):
                    t = tree[node]
                    tree[node] = cur
                    cur = t
                node >>= 1
            if cur != -1:
                tree[0] = cur
        cur_meta[2] = 1
        cur_meta[3] = -1

    if cur_meta[3] >= 0:
        leaf = cur_meta[3]
        if mode == 1 and exhausted[leaf] == 0:
            # the refilled frame's head record needs a fresh slot id
            a0 = fids[leaf] * p + offs[leaf]
            kl0 = _u16(pool, a0)
            slot_ids[leaf] = hash_bytes(pool, a0 + KLEN_SIZE, kl0,
                                        slot_seed) % H
        _replay(pool, p, fids, offs, slot_ids, exhausted, mode, tree, f,
                leaf, ctr)
        cur_meta[3] = -1

    while True:
        w = tree[0]
        if exhausted[w] == 1:
            # all runs done: flush the trailing group
            if fold == 1 and cur_meta[0] == 1:
                if not _emit_group(pool, used, p, out_fid, cur_key,
                                   cur_meta[1], cur_state, nf, finalize,
                                   finish_ops, finish_src):
                    return OUT_FULL, np.int64(-1)
                ctr[CTR_EMIT] += 1
                cur_meta[0] = 0
            return OK_DONE, np.int64(-1)

        a = fids[w] * p + offs[w]
        klen = _u16(pool, a)
        ko = a + KLEN_SIZE
        fo = ko + klen

        if fold == 1:
            if cur_meta[0] == 1:
                # make sure an emit could succeed before deciding merge/emit
                need = KLEN_SIZE + cur_meta[1] + FIELD_SIZE * (
                    finish_ops.shape[0] if finalize else nf)
                if used[out_fid] + need > p:
                    return OUT_FULL, np.int64(-1)
                ctr[CTR_GCMP] += 1
                if _key_cmp(pool, ko, klen, cur_key, 0, cur_meta[1]) == 0:
                    _merge_state(cur_state, pool, fo, merge_ops)
                else:
                    _emit_group(pool, used, p, out_fid, cur_key, cur_meta[1],
                                cur_state, nf, finalize, finish_ops,
                                finish_src)
                    ctr[CTR_EMIT] += 1
                    cur_meta[1] = klen
                    for b in range(klen):
                        cur_key[b] = pool[ko + b]
                    for j in range(nf):
                        cur_state[j] = _get_f64(pool, fo + j * FIELD_SIZE)
            else:
                cur_meta[0] = 1
                cur_meta[1] = klen
                for b in range(klen):
                    cur_key[b] = pool[ko + b]
                for j in range(nf):
                    cur_state[j] = _get_f64(pool, fo + j * FIELD_SIZE)
        else:
            if not _emit_record(pool, used, p, out_fid, pool, ko, klen, fo,
                                nf, False, finish_ops, finish_src):
                return OUT_FULL, np.int64(-1)
            ctr[CTR_EMIT] += 1

        # advance run w to its next record
        nxt = fo + FIELD_SIZE * nf - fids[w] * p
        offs[w] = nxt
        need_refill = False
        if nxt > p - KLEN_SIZE:
            need_refill = True
        elif _u16(pool, fids[w] * p + nxt) == 0:
            need_refill = True
        if need_refill:
            cur_meta[3] = w
            return NEED_REFILL, np.int64(w)
        if mode == 1:
            a2 = fids[w] * p + nxt
            kl2 = _u16(pool, a2)
            slot_ids[w] = hash_bytes(pool, a2 + KLEN_SIZE, kl2, slot_seed) % H
        _replay(pool, p, fids, offs, slot_ids, exhausted, mode, tree, f, w, ctr)


# ---------------------------------------------------------------------------
# hybrid-hash kernels
# ---------------------------------------------------------------------------


@njit
def k_hh_push(pool, used, p, src, soff, nf, slot_seed, part_seed, cuts,
              table_on, slots, H, bloom, bloom_on,
              tfids, ntf, tmeta, out_fids, merge_ops, ctr):
    """Hash-partition records; partition 0 aggregates in the table (if on),
    other partitions (or an overflowed partition 0) append raw to buffers.

    Returns (status, soff, aux): TABLE_FULL, OUT_FULL(aux=partition), or
    OK_DONE. With table_on=0 and a single cut this is pure partitioning.
    """
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff, np.int64(-1)
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff, np.int64(-1)
        koff = soff + KLEN_SIZE
        foff = koff + klen
        up = hash_bytes(src, koff, klen, part_seed)
        pidx = _part_of(up, cuts)
        if pidx == 0 and table_on == 1:
            u = hash_bytes(src, koff, klen, slot_seed)
            s = u % H
            addr = _chain_find(pool, slots, s, src, koff, klen, ctr)
            if addr != -1:
                _merge_fields(pool, addr + LINK_SIZE + KLEN_SIZE + klen, src,
                              foff, merge_ops)
                ctr[CTR_AGG] += 1
            else:
                newslot = 1 if slots[s] == -1 else 0
                if not _table_append(pool, used, p, tfids, ntf, tmeta, slots,
                                     s, src, koff, klen, src, foff, nf):
                    return TABLE_FULL, soff, np.int64(-1)
                ctr[CTR_INS] += 1
                ctr[CTR_OCC] += newslot
                if bloom_on:
                    hb = ((u ^ (u >> 7)) * 0x2545F491) & M32
                    bloom[s] |= np.uint8((1 << (hb & 7)) | (1 << ((hb >> 13) & 7)))
        else:
            ofid = out_fids[pidx]
            need = KLEN_SIZE + klen + FIELD_SIZE * nf
            if used[ofid] + need > p:
                return OUT_FULL, soff, np.int64(pidx)
            base = ofid * p + used[ofid]
            for i in range(need):
                pool[base + i] = src[soff + i]
            used[ofid] = base + need - ofid * p
            ctr[CTR_SPILL] += 1
        ctr[CTR_RECS] += 1
        soff = foff + FIELD_SIZE * nf


@njit
def k_pp_probe(pool, used, p, src, soff, nf, slot_seed, spill_seed, nspill,
               slots, H, bloom, bloom_on, out_fids, merge_ops, ctr):
    """Pre-partitioning stage 2: aggregate hits in the full table, route
    misses to spill buffers; the bloom byte skips chains for definite misses.

    Returns (status, soff, aux) like k_hh_push.
    """
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff, np.int64(-1)
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff, np.int64(-1)
        koff = soff + KLEN_SIZE
        foff = koff + klen
        u = hash_bytes(src, koff, klen, slot_seed)
        s = u % H
        ctr[CTR_PROBES] += 1
        hit_addr = np.int64(-1)
        passed = True
        if bloom_on:
            hb = ((u ^ (u >> 7)) * 0x2545F491) & M32
            mask = np.uint8((1 << (hb & 7)) | (1 << ((hb >> 13) & 7)))
            if (bloom[s] & mask) != mask:
                passed = False
        if passed:
            ctr[CTR_BLOOM_PASS] += 1
            hit_addr = _chain_find(pool, slots, s, src, koff, klen, ctr)
        if hit_addr != -1:
            _merge_fields(pool, hit_addr + LINK_SIZE + KLEN_SIZE + klen, src,
                          foff, merge_ops)
            ctr[CTR_AGG] += 1
        else:
            pidx = hash_bytes(src, koff, klen, spill_seed) % nspill
            ofid = out_fids[pidx]
            need = KLEN_SIZE + klen + FIELD_SIZE * nf
            if used[ofid] + need > p:
                return OUT_FULL, soff, np.int64(pidx)
            base = ofid * p + used[ofid]
            for i in range(need):
                pool[base + i] = src[soff + i]
            used[ofid] = base + need - ofid * p
            ctr[CTR_SPILL] += 1
        ctr[CTR_RECS] += 1
        soff = foff + FIELD_SIZE * nf


@njit
def k_sh_push(pool, used, p, src, soff, nf, slot_seed, part_seed, cuts,
              slots, H, ded_fids, tfids, ntf, tmeta, merge_ops, ctr):
    """Shared-hashing pre-spill insert: one table shared by all partitions.

    Spilling partitions prefer their dedicated frame, everyone overflows into
    the shared frames. Returns (status, soff): FIRST_SPILL when nothing fits.
    """
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff
        koff = soff + KLEN_SIZE
        foff = koff + klen
        u = hash_bytes(src, koff, klen, slot_seed)
        s = u % H
        addr = _chain_find(pool, slots, s, src, koff, klen, ctr)
        if addr != -1:
            _merge_fields(pool, addr + LINK_SIZE + KLEN_SIZE + klen, src, foff,
                          merge_ops)
            ctr[CTR_AGG] += 1
        else:
            up = hash_bytes(src, koff, klen, part_seed)
            pidx = _part_of(up, cuts)
            placed = False
            need = LINK_SIZE + KLEN_SIZE + klen + FIELD_SIZE * nf
            if pidx >= 1:
                dfid = ded_fids[pidx - 1]
                if used[dfid] + need <= p:
                    base = dfid * p + used[dfid]
                    _put_i64(pool, base, slots[s])
                    rec = base + LINK_SIZE
                    _put_u16(pool, rec, klen)
                    for i in range(klen):
                        pool[rec + KLEN_SIZE + i] = src[koff + i]
                    fo2 = rec + KLEN_SIZE + klen
                    for j in range(nf):
                        _put_f64(pool, fo2 + j * FIELD_SIZE,
                                 _get_f64(src, foff + j * FIELD_SIZE))
                    used[dfid] = base + need - dfid * p
                    slots[s] = base
                    placed = True
            if not placed:
                newslot = 1 if slots[s] == -1 else 0
                if not _table_append(pool, used, p, tfids, ntf, tmeta, slots,
                                     s, src, koff, klen, src, foff, nf):
                    return FIRST_SPILL, soff
                ctr[CTR_OCC] += newslot
            ctr[CTR_INS] += 1
        ctr[CTR_RECS] += 1
        soff = foff + FIELD_SIZE * nf


@njit
def k_sh_relocate(pool, used, p, src_fid, soff, nf, part_seed, cuts,
                  slots2, H2, slot_seed2, tfids2, ntf2, tmeta2,
                  out_fids, merge_ops, ctr):
    """First-spill relocation: walk one table frame's records; partition-0
    groups are rehashed into the new storage, the rest go to spill buffers.

    Source records carry the 8-byte link prefix. Returns (status, soff, aux):
    OUT_FULL(aux=partition), DST_FULL, or OK_DONE at frame end.
    """
    base = src_fid * p
    limit = used[src_fid]
    while True:
        if soff >= limit:
            return OK_DONE, soff, np.int64(-1)
        rec = base + soff + LINK_SIZE
        klen = _u16(pool, rec)
        koff = rec + KLEN_SIZE
        foff = koff + klen
        need = LINK_SIZE + KLEN_SIZE + klen + FIELD_SIZE * nf
        up = hash_bytes(pool, koff, klen, part_seed)
        pidx = _part_of(up, cuts)
        if pidx == 0:
            u = hash_bytes(pool, koff, klen, slot_seed2)
            s = u % H2
            # keys are unique within the old table, but walk the chain anyway
            # so relocation comparisons match the unique-preload cost term
            addr = _chain_find(pool, slots2, s, pool, koff, klen, ctr)
            if addr == -1:
                newslot = 1 if slots2[s] == -1 else 0
                if not _table_append(pool, used, p, tfids2, ntf2, tmeta2,
                                     slots2, s, pool, koff, klen, pool, foff,
                                     nf):
                    return DST_FULL, soff, np.int64(-1)
                ctr[CTR_OCC] += newslot
            else:
                _merge_fields(pool, addr + LINK_SIZE + KLEN_SIZE + klen, pool,
                              foff, merge_ops)
        else:
            ofid = out_fids[pidx]
            rneed = KLEN_SIZE + klen + FIELD_SIZE * nf
            if used[ofid] + rneed > p:
                return OUT_FULL, soff, np.int64(pidx)
            obase = ofid * p + used[ofid]
            for i in range(rneed):
                pool[obase + i] = pool[rec + i]
            used[ofid] = obase + rneed - ofid * p
            ctr[CTR_SPILL] += 1
        soff += need


@njit
def k_dd_push(pool, used, p, src, soff, nf, slot_seed, part_seed, nparts,
              slots, H_per, tail_fid, spilled, out_fids, merge_ops, ctr):
    """Dynamic destaging insert: per-partition slot ranges and frame chains.

    Returns (status, soff, aux): NEED_FRAME(aux=partition) when a resident
    partition's tail frame is full, OUT_FULL(aux=partition) for spill
    buffers, else OK_DONE.
    """
    while True:
        if soff > p - KLEN_SIZE:
            return OK_DONE, soff, np.int64(-1)
        klen = _u16(src, soff)
        if klen == 0:
            return OK_DONE, soff, np.int64(-1)
        koff = soff + KLEN_SIZE
        foff = koff + klen
        part = hash_bytes(src, koff, klen, part_seed) % nparts
        if spilled[part] == 1:
            ofid = out_fids[part]
            need = KLEN_SIZE + klen + FIELD_SIZE * nf
            if used[ofid] + need > p:
                return OUT_FULL, soff, np.int64(part)
            base = ofid * p + used[ofid]
            for i in range(need):
                pool[base + i] = src[soff + i]
            used[ofid] = base + need - ofid * p
            ctr[CTR_SPILL] += 1
        else:
            u = hash_bytes(src, koff, klen, slot_seed)
            s = part * H_per + u % H_per
            addr = _chain_find(pool, slots, s, src, koff, klen, ctr)
            if addr != -1:
                _merge_fields(pool, addr + LINK_SIZE + KLEN_SIZE + klen, src,
                              foff, merge_ops)
                ctr[CTR_AGG] += 1
            else:
                need = LINK_SIZE + KLEN_SIZE + klen + FIELD_SIZE * nf
                fid = tail_fid[part]
                if used[fid] + need > p:
                    return NEED_FRAME, soff, np.int64(part)
                base = fid * p + used[fid]
                _put_i64(pool, base, slots[s])
                rec = base + LINK_SIZE
                _put_u16(pool, rec, klen)
                for i in range(klen):
                    pool[rec + KLEN_SIZE + i] = src[koff + i]
                fo2 = rec + KLEN_SIZE + klen
                for j in range(nf):
                    _put_f64(pool, fo2 + j * FIELD_SIZE,
                             _get_f64(src, foff + j * FIELD_SIZE))
                used[fid] = base + need - fid * p
                slots[s] = base
                ctr[CTR_INS] += 1
        ctr[CTR_RECS] += 1
        soff = foff + FIELD_SIZE * nf


@njit
def k_count_records(buf, p, nf):
    """Count state records in one frame (walks to the end-of-frame mark)."""
    off = np.int64(0)
    n = np.int64(0)
    while off <= p - KLEN_SIZE:
        klen = _u16(buf, off)
        if klen == 0:
            break
        n += 1
        off += KLEN_SIZE + klen + FIELD_SIZE * nf
    return n
