"""Cost measurements for the full and windowed triple-angle kernels."""

from __future__ import annotations

import time
import tracemalloc

import numpy as np

from .relations import triple_full, triple_window

BENCH_SCHEMA = "ckd.bench/1"


def measure(variant: str, n: int, d: int, delta: int, seed: int = 0, use_numba: bool | None = None) -> dict:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(1, n, d))
    valid = np.ones((1, n), dtype=bool)
    if variant == "windowed":
        triple_window(X, valid, delta, use_numba)  # warm-up / JIT
        tracemalloc.start()
        t0 = time.perf_counter()
        out, _, cache = triple_window(X, valid, delta, use_numba)
        wall = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        ops, aux = cache.ops, cache.aux_elements
    elif variant == "naive":
        tracemalloc.start()
        t0 = time.perf_counter()
        out, _, ops, aux = triple_full(X, valid)
        wall = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return {"n": n, "d": d, "delta": delta, "variant": variant, "wall_time": wall, "ops": int(ops),
            "aux_elements": int(aux), "traced_extra_bytes": int(peak - out.nbytes)}


def bench_relations(n_list, delta_list, d: int = 16, variants=("naive", "windowed"), use_numba=None) -> list[dict]:
    rows = []
    for n in n_list:
        for delta in delta_list:
            for v in variants:
                if v == "naive" and delta != delta_list[0]:
                    continue  # the full kernel ignores delta
                rows.append(measure(v, n, d, delta, use_numba=use_numba))
    return rows


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def linear_r2(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    tot = ((y - y.mean()) ** 2).sum()
    return float(1.0 - (resid ** 2).sum() / tot) if tot > 0 else 0.0
