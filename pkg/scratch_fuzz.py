"""Scratch: randomized operator fuzz vs dict oracle, both backends."""
import os
import random
import sys

import numpy as np

from aggbench.core import (AggSpec, DatasetStats, InvalidBudget, iter_records,
                           frames_from_records)
from aggbench.operators import OPERATORS, EngineConfig, OpContext, run_operator
from aggbench.run_store import FrameSource


def finish(agg, states):
    out = []
    for op, src in zip(agg.finish_ops, agg.finish_src):
        if op == 0:
            out.append(states[src])
        else:
            out.append(states[src] / states[src + 1])
    return out


def one_cell(cell_seed):
    rng = random.Random(cell_seed)
    fs = rng.choice([512, 1024, 4096])
    M = rng.choice([4, 5, 6, 8, 12, 20, 40])
    n = rng.choice([0, 1, 7, 100, 1000, 5000, 20000])
    m = max(1, min(n, rng.choice([1, 2, 10, 100, 1000, 8000])))
    aggs = rng.choice([["sum"], ["count"], ["avg"], ["sum", "count", "min", "max"],
                       ["min", "avg"], ["max", "sum", "avg"]])
    keylen = rng.choice(["short", "long", "mixed"])
    dist = rng.choice(["uniform", "hot", "runs"])
    est_mode = rng.choice([None, "exact", "under", "over"])
    agg = AggSpec.from_names(aggs)

    def mk_key(i):
        if keylen == "short":
            return f"k{i}".encode()
        if keylen == "long":
            return (f"key-{i:09d}-" + "x" * 180).encode()
        return (f"k{i}" if i % 3 else f"key-{i:06d}-" + "y" * (i % 97)).encode()

    recs = []
    oracle = {}
    for j in range(n):
        if dist == "uniform":
            i = rng.randrange(m)
        elif dist == "hot":
            i = 0 if rng.random() < 0.6 else rng.randrange(m)
        else:
            i = (j * m) // max(n, 1)
        key = mk_key(i)
        val = rng.randrange(4000) / 4.0
        st = [0.0] * agg.state_width
        # init record state per agg list
        w = 0
        for name in aggs:
            if name == "sum":
                st[w] = val; w += 1
            elif name == "count":
                st[w] = 1.0; w += 1
            elif name == "min":
                st[w] = val; w += 1
            elif name == "max":
                st[w] = val; w += 1
            elif name == "avg":
                st[w] = val; st[w + 1] = 1.0; w += 2
        recs.append((key, st))
        cur = oracle.get(key)
        if cur is None:
            oracle[key] = list(st)
        else:
            w = 0
            for name in aggs:
                if name == "sum":
                    cur[w] += st[w]; w += 1
                elif name == "count":
                    cur[w] += st[w]; w += 1
                elif name == "min":
                    cur[w] = min(cur[w], st[w]); w += 1
                elif name == "max":
                    cur[w] = max(cur[w], st[w]); w += 1
                elif name == "avg":
                    cur[w] += st[w]; cur[w + 1] += st[w + 1]; w += 2
    frames = frames_from_records(recs, agg.state_width, fs)
    m_true = len(oracle)
    if est_mode is None:
        gest = None
    elif est_mode == "exact":
        gest = float(max(m_true, 1))
    elif est_mode == "under":
        gest = max(m_true / 64.0, 1.0)
    else:
        gest = m_true * 64.0 + 10
    rec_bytes = 2 + 8 + 8 * agg.state_width
    stats = DatasetStats(R=max(len(frames), 1), R_t=n,
                         G=max(m_true * rec_bytes / fs, 1e-9) if n else 0.0,
                         G_t=m_true)
    cfg = EngineConfig(memory_frames=M, frame_size=fs, seed=cell_seed,
                       group_estimate=gest)
    want = {k: finish(agg, st) for k, st in oracle.items()}
    pass_algos = []
    for algo in OPERATORS:
        with OpContext(cfg, agg) as ctx:
            try:
                op = OPERATORS[algo](ctx, stats)
            except InvalidBudget:
                continue
            src = FrameSource.from_frames(frames, fs)
            got = {}
            try:
                for fr in run_operator(op, src):
                    for k, vals in iter_records(fr, agg.out_width):
                        assert k not in got, f"{algo} dup {k!r}"
                        got[k] = list(vals)
            except InvalidBudget:
                continue
            met = ctx.metrics
            leaked = ctx.alloc.outstanding
        assert leaked == 0, f"{algo} leak {leaked}"
        assert met.high_water <= M, f"{algo} hw {met.high_water}>{M}"
        assert set(got) == set(want), (
            f"{algo} keys: miss {len(set(want)-set(got))} extra {len(set(got)-set(want))}")
        for k, v in want.items():
            g = got[k]
            for a, b in zip(v, g):
                assert abs(a - b) <= 1e-9 + 1e-12 * abs(a), f"{algo} {k!r} {v} {g}"
        assert met.output_groups == len(want), (
            f"{algo} output_groups {met.output_groups} != {len(want)}")
        pass_algos.append(algo)
    return (fs, M, n, m, dist, keylen, est_mode, len(pass_algos))


if __name__ == "__main__":
    os.environ.setdefault("AGGBENCH_TMP", "/tmp/aggfuzz")
    os.makedirs("/tmp/aggfuzz", exist_ok=True)
    lo = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    hi = int(sys.argv[2]) if len(sys.argv) > 2 else 120
    for cs in range(lo, hi):
        info = one_cell(cs)
        if cs % 10 == 0:
            print("cell", cs, info, flush=True)
    print("FUZZ OK", lo, hi)
