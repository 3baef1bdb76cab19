"""Dev scratch: model-vs-measured ratios per operator on uniform data."""

import random
import sys

from aggbench.core import AggSpec, DatasetStats, frames_from_records, iter_records
from aggbench.operators import OPERATORS, EngineConfig, OpContext, run_operator
from aggbench.run_store import FrameSource
from aggbench import cost_models as cm


def build(n, m, seed, frame_size=1024):
    agg = AggSpec.from_names(["sum", "count"])
    rng = random.Random(seed)
    keys = [i for i in range(m)] + [rng.randrange(m) for _ in range(n - m)]
    rng.shuffle(keys)
    recs = []
    for i in keys:
        key = f"{i:012d}".encode()
        val = rng.randrange(4000) / 4.0
        recs.append((key, [val, 1.0]))
    frames = frames_from_records(recs, agg.state_width, frame_size)
    rec_bytes = 2 + 12 + 8 * agg.state_width
    stats = DatasetStats(R=max(len(frames), 1), R_t=n,
                         G=m * rec_bytes / frame_size, G_t=m)
    return frames, stats, agg


def measure(algo, frames, stats, agg, cfg):
    with OpContext(cfg, agg) as ctx:
        op = OPERATORS[algo](ctx, stats)
        src = FrameSource.from_frames(frames, cfg.frame_size)
        n_out = 0
        for fr in run_operator(op, src):
            for _ in iter_records(fr, agg.out_width):
                n_out += 1
        met = ctx.metrics
    assert met.high_water <= cfg.memory_frames, algo
    assert n_out == stats.G_t, (algo, n_out, stats.G_t)
    return met


def main():
    n = 40000
    cases = []
    for ratio, m in [("100%", n), ("44.1%", 17640), ("6.25%", 2500),
                     ("0.5%", 200)]:
        for M in (8, 16, 24, 48):
            cases.append((ratio, m, M))
    algos = list(OPERATORS)
    if len(sys.argv) > 1:
        algos = sys.argv[1].split(",")
    worst = {}
    for ratio, m, M in cases:
        frames, stats, agg = build(n, m, seed=7)
        cfg = EngineConfig(memory_frames=M, frame_size=1024, seed=11)
        pm = cm.CostParameters.from_config(stats, cfg, agg.state_width)
        print(f"=== n={n} m={m} ({ratio}) M={M}  b={pm.b:.1f}")
        for algo in algos:
            try:
                met = measure(algo, frames, stats, agg, cfg)
            except Exception as e:
                print(f"  {algo:18s} measured ERROR {type(e).__name__}: {e}")
                continue
            try:
                rep = cm.MODELS[algo](stats, pm)
            except Exception as e:
                print(f"  {algo:18s} model ERROR {type(e).__name__}: {e}")
                continue
            mio = met.frames_read + met.frames_written
            pio = rep.frames_read + rep.frames_written
            cerr = (rep.comparisons - met.comparisons) / max(met.comparisons, 1)
            ioerr = (pio - mio) / max(mio, 1)
            flag = ""
            if abs(ioerr) > 0.10 or abs(cerr) > 0.25:
                flag = "  <-- OUT"
            print(f"  {algo:18s} cmp {met.comparisons:>10d} vs {rep.comparisons:>12.0f}"
                  f" ({cerr:+6.1%})   io {mio:>6d} vs {pio:>8.1f} ({ioerr:+6.1%}){flag}")
            key = algo
            wc, wi = worst.get(key, (0.0, 0.0))
            worst[key] = (max(wc, abs(cerr)), max(wi, abs(ioerr)))
    print("\nworst abs error per algo (cmp, io):")
    for k, (wc, wi) in worst.items():
        print(f"  {k:18s} cmp {wc:6.1%}   io {wi:6.1%}")


if __name__ == "__main__":
    main()
