"""Scratch: drive all six operators over random data vs a dict oracle."""
import os
import sys
import random

import numpy as np

from aggbench.core import AggSpec, DatasetStats, FrameAllocator, iter_records
from aggbench.operators import OPERATORS, EngineConfig, OpContext, run_operator
from aggbench.run_store import FrameSource


def make_dataset(n, m, seed, agg, frame_size):
    rng = random.Random(seed)
    recs = []
    oracle = {}
    for _ in range(n):
        key = f"k{rng.randrange(m)}".encode()
        val = rng.randrange(1000) / 4.0
        recs.append((key, [val, 1.0, val, val]))  # sum,count,min,max states
        st = oracle.get(key)
        if st is None:
            oracle[key] = [val, 1.0, val, val]
        else:
            st[0] += val
            st[1] += 1.0
            st[2] = min(st[2], val)
            st[3] = max(st[3], val)
    from aggbench.core import frames_from_records
    frames = frames_from_records(recs, agg.state_width, frame_size)
    return frames, oracle


def finish(agg, states):
    out = []
    for op, src in zip(agg.finish_ops, agg.finish_src):
        if op == 0:
            out.append(states[src])
        else:
            out.append(states[src] / states[src + 1])
    return out


def run_case(algo, n, m, M, seed, frame_size=1024, group_estimate=None,
             input_sorted=False):
    agg = AggSpec.from_names(["sum", "count", "min", "max"])
    frames, oracle = make_dataset(n, m, seed, agg, frame_size)
    if input_sorted:
        # rebuild sorted by key bytes
        recs = []
        for fr in frames:
            for k, st in iter_records(fr, agg.state_width):
                recs.append((k, list(st)))
        recs.sort(key=lambda kv: kv[0])
        from aggbench.core import frames_from_records
        frames = frames_from_records(recs, agg.state_width, frame_size)
    cfg = EngineConfig(memory_frames=M, frame_size=frame_size, seed=seed,
                       group_estimate=group_estimate,
                       input_sorted=input_sorted)
    b = len(frames[0]) if frames else frame_size
    rec_bytes = 2 + 4 + 8 * agg.state_width
    stats = DatasetStats(R=max(len(frames), 1), R_t=n,
                         G=max(m * rec_bytes / frame_size, 1e-9), G_t=m)
    with OpContext(cfg, agg) as ctx:
        cls = OPERATORS[algo]
        op = cls(ctx, stats)
        src = FrameSource.from_frames(frames, frame_size)
        got = {}
        for fr in run_operator(op, src):
            for k, vals in iter_records(fr, agg.out_width):
                if k in got:
                    raise AssertionError(f"{algo}: dup key {k!r}")
                got[k] = list(vals)
        met = ctx.metrics
        leaked = ctx.alloc.outstanding
    assert leaked == 0, f"{algo}: leaked {leaked} frames"
    assert met.high_water <= M, f"{algo}: high water {met.high_water} > {M}"
    want = {k: finish(agg, st) for k, st in oracle.items()}
    if set(got) != set(want):
        miss = set(want) - set(got)
        extra = set(got) - set(want)
        raise AssertionError(
            f"{algo}: keys differ miss={sorted(miss)[:5]} extra={sorted(extra)[:5]}")
    for k, vals in want.items():
        gv = got[k]
        for a, b2 in zip(vals, gv):
            assert abs(a - b2) < 1e-6, f"{algo}: {k!r} want {vals} got {gv}"
    return met


if __name__ == "__main__":
    os.environ.setdefault("AGGBENCH_TMP", "/tmp/aggsmoke")
    os.makedirs("/tmp/aggsmoke", exist_ok=True)
    cases = [
        # (n, m, M, seed, kwargs)
        (50, 8, 8, 1, {}),
        (500, 40, 6, 2, {}),
        (2000, 400, 6, 3, {}),
        (2000, 1500, 5, 4, {}),
        (5000, 2500, 4, 5, {}),
        (3000, 1000, 16, 6, {}),
        (1000, 3, 4, 7, {}),          # heavy dup
        (4000, 2000, 6, 8, {"group_estimate": 4.0}),   # wild underestimate
        (800, 30, 6, 9, {"group_estimate": 100000.0}),  # wild overestimate
    ]
    algos = list(OPERATORS)
    for algo in algos:
        for (n, m, M, seed, kw) in cases:
            if algo == "dynamic_destaging" and M < 5:
                continue
            try:
                met = run_case(algo, n, m, M, seed, **kw)
            except Exception as e:
                print(f"FAIL {algo} n={n} m={m} M={M} seed={seed} kw={kw}: "
                      f"{type(e).__name__}: {e}")
                raise
            print(f"ok {algo:18s} n={n:5d} m={m:5d} M={M:3d} kw={kw} "
                  f"out={met.output_groups} fw={met.frames_written} "
                  f"fr={met.frames_read} hw={met.high_water}")
        srt = run_case(algo, 1500, 120, 5, 11, input_sorted=(algo == "sort_based"))
        print(f"ok {algo:18s} sorted-path/extra out={srt.output_groups}")
    print("ALL SMOKE OK")
