"""Closed-form building blocks for the per-algorithm cost models.

All functions are pure float math over record/group/frame counts. The
conventions: n is a record population, m the distinct groups hidden in it,
H a slot count, U an estimated key universe. Chain-walk costs count key
comparisons; I/O terms count frames.
"""

from __future__ import annotations

import math

import numpy as np

from aggbench.core import ModelDomainError
from aggbench.run_store import plan_merge_rounds


def expected_groups(r: float, n: float, m: float) -> float:
    """Distinct groups expected among r records drawn from n holding m."""
    if n <= 0 or m <= 0:
        return 0.0
    r = min(max(r, 0.0), n)
    return m * (1.0 - (1.0 - r / n) ** (n / m))


def expected_records(k: float, n: float, m: float) -> float:
    """Records consumed, in expectation, by the time k distinct groups of
    the m hiding in n records have been seen."""
    if n <= 0 or m <= 0:
        return 0.0
    if k >= m:
        return float(n)
    k = max(k, 0.0)
    return n * (1.0 - (1.0 - k / m) ** (m / n))


def sort_comparisons(n: float, m: float) -> float:
    """Expected three-way quicksort comparisons for n records, m distinct.

    Equal keys collapse into the pivot block, so duplicate-heavy inputs pay
    roughly one partitioning pass per distinct value instead of n log n.
    """
    if m > n + 1e-9 * max(1.0, n):
        raise ModelDomainError(f"sort cost needs n >= m, got n={n}, m={m}")
    if n <= 1 or m <= 0:
        return 0.0
    m = min(max(m, 1.0), n)
    if m <= 3.0:
        # one isolating pass per value class over a shrinking prefix:
        # sum of (n*(m-i)/m - 1) for i < m, which closes to n(m+1)/2 - m
        # and stays continuous for fractional m (slot-chain sorts)
        return max(0.0, n * (m + 1.0) / 2.0 - m)
    return 2.0 * (n / m) * (m - 1.0) * math.log(m - 2.0) \
        + (n / m - 1.0) * (2.0 * m - 3.0)


def quicksort_comparisons(n: float, m: float) -> float:
    """Expected comparisons of the engine's in-place fat-pivot quicksort.

    Solves the pass-per-pivot recurrence exactly — T(m) = dm−1 +
    (2/m)ΣT(j) with d = n/m duplicates per value — instead of the
    leading-order closed form of ``sort_comparisons``, which overshoots
    at desk scale because it drops the −Θ(n) term. Closed form:
    2d(m+1)·H_m − 3dm − 1.
    """
    if m > n + 1e-9 * max(1.0, n):
        raise ModelDomainError(f"sort cost needs n >= m, got n={n}, m={m}")
    if n <= 1 or m <= 0:
        return 0.0
    m = min(max(m, 1.0), n)
    if m <= 3.0:
        return max(0.0, n * (m + 1.0) / 2.0 - m)
    d = n / m
    harm = math.log(m) + 0.5772156649015329 + 1.0 / (2.0 * m) \
        - 1.0 / (12.0 * m * m)
    return 2.0 * d * (m + 1.0) * harm - 3.0 * d * m - 1.0


def solve_universe(n: float, m: float) -> float:
    """Invert m = U(1 - (1-1/U)^n) for the key universe U by bisection."""
    if m <= 0 or n <= 0:
        return 0.0
    if m >= n:
        return math.inf
    lo, hi = m, m * n
    # observed distinct grows with U; expand hi until it brackets
    def observed(u: float) -> float:
        return u * (1.0 - (1.0 - 1.0 / u) ** n)

    while observed(hi) < m and hi < 1e18:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if observed(mid) < m:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * max(1.0, lo):
            break
    return 0.5 * (lo + hi)


def occupied_slots(H: float, k: float) -> float:
    """Expected occupied slots after k distinct keys land in H slots."""
    if H <= 0:
        return 0.0
    return H * (1.0 - (1.0 - 1.0 / H) ** k)


def chain_insert_cost(k, H: float, U: float) -> float:
    """Comparisons to push one record per entry of k into a chained table.

    k is an array of distinct-group counts already stored when each record
    arrives. A record hits a stored group with probability k/U and walks
    half its slot's chain; otherwise it walks a whole (occupied) chain.
    """
    k = np.asarray(k, np.float64)
    if k.size == 0 or H <= 0:
        return 0.0
    Hu = H * (1.0 - (1.0 - 1.0 / H) ** k)
    L = np.where(k > 0, k / np.maximum(Hu, 1e-300), 0.0)
    if math.isinf(U):
        hit = np.zeros_like(k)
    else:
        hit = np.minimum(k / max(U, 1e-300), 1.0)
    c = hit * (L + 1.0) / 2.0 + (1.0 - hit) * L * (Hu / H)
    return float(c.sum())


def unique_preload_cost(u: float, H: float) -> float:
    """Comparisons to insert u known-distinct keys into an empty table."""
    if H <= 0 or u <= 1:
        return 0.0
    return u * (u - 1.0) / (2.0 * H)


def table_build_cost(n_records: float, n: float, m: float, cap: float,
                     H: float, U: float) -> float:
    """Comparisons for streaming n_records (drawn from an n/m population)
    into an empty chained table that holds at most cap distinct groups."""
    n_ins = int(min(n_records, n))
    if n_ins <= 0:
        return 0.0
    i = np.arange(1, n_ins + 1, dtype=np.float64)
    k = np.minimum(expected_groups_vec(i - 1.0, n, m), cap)
    return chain_insert_cost(k, H, U)


def mixed_table_build_cost(n: float, m: float, cap: float, H: float,
                           U: float, u: float) -> float:
    """Comparisons when u known-distinct groups are preloaded before raw
    records (an n/m population) stream in until cap groups are stored.

    The preload pays only chain-walk misses. Each raw insertion then sees
    u extra residents: longer chains, a higher hit probability, and more
    occupied slots.
    """
    base = unique_preload_cost(u, H)
    if H <= 0 or cap <= u or n <= 0 or m <= 0:
        return base
    n_ins = int(min(round(expected_records(cap - u, n, m)), n))
    if n_ins <= 0:
        return base
    i = np.arange(1.0, n_ins + 1.0, dtype=np.float64)
    k = expected_groups_vec(i, n, m)
    Hu = H * (1.0 - (1.0 - 1.0 / H) ** k)
    L = (k + u) / np.maximum(Hu, 1e-300)
    if math.isinf(U):
        hit = np.zeros_like(k)
    else:
        hit = np.minimum((k + u) / max(U, 1e-300), 1.0)
    nonempty = 1.0 - (1.0 - 1.0 / H) ** expected_groups_vec(i + u, n, m)
    c = hit * (L + 1.0) / 2.0 + (1.0 - hit) * L * nonempty
    return base + float(c.sum())


def expected_groups_vec(r, n: float, m: float):
    r = np.minimum(np.maximum(np.asarray(r, np.float64), 0.0), n)
    if n <= 0 or m <= 0:
        return np.zeros_like(r)
    return m * (1.0 - (1.0 - r / n) ** (n / m))


def merge_cost(runs, fan_in: int, rec_per_frame: float, shrink=None):
    """Cost of merging runs [(records, frames, raw), ...] at fan_in.

    Follows the run-merge schedule: full-width FIFO rounds, one trimming
    round, then the final merge (whose output is not written back). shrink
    maps a merged run's covered raw-record count to its post-fold record
    count; None keeps the plain sum. Returns a dict with comparisons,
    frames_read, frames_written, and the per-round record trace.
    """
    pool = [(float(r), float(f), float(w)) for (r, f, w) in runs]
    if not pool:
        return {"comparisons": 0.0, "frames_read": 0.0,
                "frames_written": 0.0, "trace": []}
    rounds = plan_merge_rounds(len(pool), fan_in)
    cmp_total = 0.0
    fr = 0.0
    fw = 0.0
    trace = []
    for idx, round_inputs in enumerate(rounds):
        ins = [pool[i] for i in round_inputs]
        recs = sum(x[0] for x in ins)
        frames = sum(x[1] for x in ins)
        raw = sum(x[2] for x in ins)
        f = len(ins)
        trace.append(recs)
        if f > 1:
            cmp_total += recs * math.log2(f)
        fr += frames
        if idx < len(rounds) - 1:
            out_recs = shrink(raw) if shrink is not None else recs
            out_recs = min(out_recs, recs)
            out_frames = math.ceil(out_recs / rec_per_frame) if out_recs else 0
            fw += out_frames
            pool.append((out_recs, float(out_frames), raw))
    return {"comparisons": cmp_total, "frames_read": fr,
            "frames_written": fw, "trace": trace}


def plan_partitions(group_frames: float, M: int) -> int:
    """Spill partitions needed so each fits a table of M frames later.

    group_frames is the frame footprint of every group's table entry
    (storage plus slot overhead). Zero partitions iff everything fits now.
    """
    if M < 3:
        raise ModelDomainError(f"hybrid partitioning needs M >= 3, got {M}")
    if group_frames <= M:
        return 0
    p = math.ceil((group_frames - M) / (M - 2))
    return max(1, min(p, M - 2))


def bloom_skip_fraction(k: float, H: float) -> float:
    """Probability a probe for an absent key passes the per-slot filter.

    Two index bits are set per stored group; a probe passes only if both of
    its bits are set. With 2k bits thrown at 8-bit slot filters, a single
    bit survives unset with (7/8)^(2k/H).
    """
    if H <= 0:
        return 1.0
    s = 1.0 - (7.0 / 8.0) ** (2.0 * k / H)
    return (1.0 / 8.0) * s + (7.0 / 8.0) * s * s
