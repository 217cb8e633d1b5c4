"""Compare the compiled and numpy recurrent kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--dtype float32]
"""
import argparse
import time

import numpy as np

from smilesprop.nn import _recurrent_py

try:
    from smilesprop.nn import _recurrent as _compiled
except ImportError:
    _compiled = None


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(impl, cell, L, B, H, dtype, repeat):
    rng = np.random.default_rng(0)
    g = 3 if cell == "gru" else 4
    xp = rng.standard_normal((L, B, g * H)).astype(dtype)
    wh = (rng.standard_normal((H, g * H)) / np.sqrt(H)).astype(dtype)
    fwd = impl.gru_forward if cell == "gru" else impl.lstm_forward
    bwd = impl.gru_backward if cell == "gru" else impl.lstm_backward
    saved = fwd(xp, wh, False)
    dhs = rng.standard_normal((L, B, H)).astype(dtype)
    tf = _best(lambda: fwd(xp, wh, False), repeat)
    tb = _best(lambda: bwd(dhs, *saved, wh, False, True), repeat)
    return tf, tb


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = p.parse_args()
    dtype = np.dtype(args.dtype)
    impls = [("python", _recurrent_py)] + ([("cython", _compiled)] if _compiled else [])
    print(f"{'cell':5} {'L':>4} {'B':>3} {'H':>4} {'backend':8} {'fwd ms':>8} {'bwd ms':>8} {'speedup':>8}")
    for cell in ("gru", "lstm"):
        for H in (32, 128):
            base = None
            for name, impl in impls:
                tf, tb = bench(impl, cell, 270, 32, H, dtype, args.repeat)
                total = tf + tb
                base = base or total
                print(f"{cell:5} {270:4} {32:3} {H:4} {name:8} {tf * 1e3:8.1f} {tb * 1e3:8.1f} {base / total:7.2f}x")
    if _compiled is None:
        print("compiled extension not built; only the numpy kernels were timed")


if __name__ == "__main__":
    main()
