"""Shared helpers: dataset builders, a dict-based oracle, and a driver."""

import os
import random

import numpy as np
import pytest

from aggbench.core import (
    AggSpec,
    DatasetStats,
    frames_from_records,
    iter_records,
)
from aggbench.operators import (
    OPERATORS,
    EngineConfig,
    OpContext,
    run_operator,
)
from aggbench.run_store import FrameSource

STATE_SETTERS = {
    "sum": lambda st, w, v: st.__setitem__(w, v),
    "count": lambda st, w, v: st.__setitem__(w, 1.0),
    "min": lambda st, w, v: st.__setitem__(w, v),
    "max": lambda st, w, v: st.__setitem__(w, v),
}


def init_state(agg_names, agg, val):
    st = [0.0] * agg.state_width
    w = 0
    for name in agg_names:
        if name == "avg":
            st[w] = val
            st[w + 1] = 1.0
            w += 2
        else:
            STATE_SETTERS[name](st, w, val)
            w += 1
    return st


def merge_state(agg_names, cur, new):
    w = 0
    for name in agg_names:
        if name == "min":
            cur[w] = min(cur[w], new[w])
            w += 1
        elif name == "max":
            cur[w] = max(cur[w], new[w])
            w += 1
        elif name == "avg":
            cur[w] += new[w]
            cur[w + 1] += new[w + 1]
            w += 2
        else:
            cur[w] += new[w]
            w += 1
    return cur


def finish_state(agg, states):
    out = []
    for op, src in zip(agg.finish_ops, agg.finish_src):
        if op == 0:
            out.append(states[src])
        else:
            out.append(states[src] / states[src + 1])
    return out


def build_dataset(n, m, seed, agg_names=("sum", "count"), dist="uniform",
                  frame_size=1024, key_style="short", sort_keys=False):
    """Random records plus the finished dict oracle and true stats."""
    agg = AggSpec.from_names(list(agg_names))
    rng = random.Random(seed)

    def mk_key(i):
        if key_style == "short":
            return f"k{i}".encode()
        return f"key-{i:08d}-{'x' * (i % 23)}".encode()

    recs = []
    oracle = {}
    for j in range(n):
        if dist == "uniform":
            i = rng.randrange(m)
        elif dist == "hot":
            i = 0 if rng.random() < 0.6 else rng.randrange(m)
        elif dist == "single":
            i = 0
        else:  # "runs": clustered keys
            i = (j * m) // max(n, 1)
        key = mk_key(i)
        val = rng.randrange(4000) / 4.0
        st = init_state(agg_names, agg, val)
        recs.append((key, st))
        cur = oracle.get(key)
        if cur is None:
            oracle[key] = list(st)
        else:
            merge_state(agg_names, cur, st)
    if sort_keys:
        recs.sort(key=lambda kv: kv[0])
    frames = frames_from_records(recs, agg.state_width, frame_size)
    m_true = len(oracle)
    rec_bytes = 2 + 8 + 8 * agg.state_width
    stats = DatasetStats(
        R=max(len(frames), 1), R_t=n,
        G=(m_true * rec_bytes / frame_size) if n else 0.0, G_t=m_true)
    want = {k: finish_state(agg, st) for k, st in oracle.items()}
    return frames, want, stats, agg


def drive(algo, frames, stats, agg, cfg, observers=None, check_keys=True,
          want=None):
    """Run one operator over in-memory frames; return (got, metrics, op)."""
    with OpContext(cfg, agg) as ctx:
        if observers:
            ctx.observers.update(observers)
        op = OPERATORS[algo](ctx, stats)
        src = FrameSource.from_frames(frames, cfg.frame_size)
        got = {}
        for fr in run_operator(op, src):
            for k, vals in iter_records(fr, agg.out_width):
                assert k not in got, f"duplicate output key {k!r}"
                got[k] = list(vals)
        met = ctx.metrics
        leaked = ctx.alloc.outstanding
    assert leaked == 0, f"{algo} leaked {leaked} frames"
    assert met.high_water <= cfg.memory_frames
    if want is not None and check_keys:
        assert set(got) == set(want)
        for k, v in want.items():
            assert got[k] == pytest.approx(v, abs=1e-9)
        assert met.output_groups == len(want)
    return got, met, op


@pytest.fixture(autouse=True, scope="session")
def _tmp_spill_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("spill")
    os.environ["AGGBENCH_TMP"] = str(path)
    yield
