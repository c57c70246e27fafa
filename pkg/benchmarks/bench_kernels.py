"""Time the windowed triple-angle kernels with and without numba.

    python3 benchmarks/bench_kernels.py [--n 64 128 256] [--delta 4 16] [--d 32] [--batch 8] [--repeat 5]

Prints one CSV row per (n, delta, path, direction) with the best-of-repeat
wall time; the numba rows exclude JIT compilation.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ckd.relations import triple_window, triple_window_backward


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--delta", type=int, nargs="+", default=[4, 16])
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print("n,delta,d,batch,path,direction,seconds,speedup_vs_numpy")
    for n in args.n:
        X = rng.normal(size=(args.batch, n, args.d))
        valid = np.ones((args.batch, n), dtype=bool)
        for delta in args.delta:
            times = {}
            for path, flag in (("numpy", False), ("numba", True)):
                out, _, cache = triple_window(X, valid, delta, flag)  # warm-up / JIT
                G = rng.normal(size=out.shape)
                triple_window_backward(G, cache, flag)
                times[path, "forward"] = best_time(lambda: triple_window(X, valid, delta, flag), args.repeat)
                times[path, "backward"] = best_time(lambda: triple_window_backward(G, cache, flag), args.repeat)
            for (path, direction), sec in times.items():
                speed = times["numpy", direction] / sec
                print(f"{n},{delta},{args.d},{args.batch},{path},{direction},{sec:.6f},{speed:.2f}")


if __name__ == "__main__":
    main()
