"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class GradReport:
    max_rel_error: float
    worst_tensor: str
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int

    def __str__(self):
        return (f"max rel err {self.max_rel_error:.3e} at {self.worst_tensor}{list(self.worst_index)} "
                f"(analytic {self.analytic:+.6e}, numeric {self.numeric:+.6e}, {self.checked} coords)")


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.ndindex(*x.shape) if index is None else index
    for idx in it:
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * eps)
    return g


def gradcheck(f: Callable[[], float], tensors: dict, analytic: dict, eps: float = 1e-5,
              floor: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> GradReport:
    """Compare analytic gradients with central differences.

    ``f`` evaluates the loss reading the arrays in ``tensors``, which are
    perturbed in place. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor * max(1, |loss|))``. The floor keeps
    coordinates whose true gradient is zero from being judged on
    round-off, which scales with the loss magnitude. With
    ``max_coords`` a random subset of each tensor is probed.
    """
    if tensors and next(iter(tensors.values())).dtype != np.float64:
        raise ValueError("gradcheck needs 64-bit tensors")
    base = f()
    if not np.isfinite(base):
        raise FloatingPointError(f"loss is not finite: {base}")
    floor = floor * max(1.0, abs(base))
    rng = np.random.default_rng(seed)
    worst = GradReport(0.0, "", (), 0.0, 0.0, 0)
    checked = 0
    for name in sorted(tensors):
        x, a = tensors[name], np.asarray(analytic[name])
        if a.shape != x.shape:
            raise ValueError(f"{name}: gradient shape {a.shape} != tensor shape {x.shape}")
        idx = list(np.ndindex(*x.shape))
        if max_coords is not None and len(idx) > max_coords:
            pick = rng.choice(len(idx), max_coords, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        num = numeric_grad(f, x, eps, idx)
        for i in idx:
            err = abs(a[i] - num[i]) / max(abs(a[i]), abs(num[i]), floor)
            if err > worst.max_rel_error or not checked:
                worst = GradReport(float(err), name, i, float(a[i]), float(num[i]), 0)
            checked += 1
    worst.checked = checked
    return worst
