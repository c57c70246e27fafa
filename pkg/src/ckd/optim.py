"""Adaptive-moment optimizer with linear warmup and linear decay.

Update for parameter ``p`` with gradient ``g`` at step ``t`` (1-based)::

    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g**2
    p -= lr_t * (m / (1 - beta1**t)) / (sqrt(v / (1 - beta2**t)) + eps) + lr_t * wd * p

``lr_t`` ramps linearly from 0 to ``lr`` over the first ``warmup * total``
steps and then decays linearly to 0 at ``total``. The default ``beta1 = 0``
makes the update momentum-free.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float, total_steps: int, warmup: float = 0.1, beta1: float = 0.0,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.lr, self.total, self.warmup = lr, int(total_steps), warmup
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def lr_at(self, t: int) -> float:
        w = max(1, int(round(self.warmup * self.total)))
        if t <= w:
            return self.lr * t / w
        return self.lr * max(0.0, (self.total - t) / max(1, self.total - w))

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        lr = self.lr_at(self.t)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * params[k]
            params[k] -= lr * upd
