"""Finite-difference checks of every distillation objective on a small random
teacher/student pair (2/16/2 student, 3/24/2 teacher)."""

from __future__ import annotations

import numpy as np

from .baselines import distilbert_cos_loss, init_projection, minilm_loss, pkd_patient_loss, tinybert_loss
from .gradcheck import gradcheck
from .losses import DistillConfig, align_layers, ckd_ltr_loss, ckd_wr_loss, logit_kd_loss, total_objective
from .model import Encoder, ModelConfig, StateGrads

CHECKS = ("ckd_wr", "ckd_ltr", "logit_kd", "total", "distilbert", "pkd", "tinybert", "minilm")


def _configs():
    common = dict(vocab_size=9, max_seq_len=7, num_classes=3, init_std=0.3)
    student = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=24, **common)
    teacher = ModelConfig(num_layers=3, hidden_dim=24, num_heads=2, ffn_dim=32, **common)
    # embedding-matching baselines need d_t == d_s
    teacher_eq = ModelConfig(num_layers=3, hidden_dim=16, num_heads=2, ffn_dim=32, **common)
    return student, teacher, teacher_eq


def gradcheck_suite(names=None, seed: int = 0, max_coords: int | None = 300):
    """Yield ``(name, GradReport)`` for each requested objective."""
    names = list(CHECKS if names is None else names)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    sc, tc, tc_eq = _configs()
    student = Encoder(sc, seed=seed + 1)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, sc.vocab_size, (2, 6))
    mask = np.array([[1, 1, 1, 1, 0, 0], [1] * 6], dtype=bool)
    y = np.array([0, 2])
    al = align_layers(tc.num_layers, sc.num_layers)
    cfg = DistillConfig(delta=2, lambda_ckd=1.0, lambda_wr=2.0, lambda_ltr=3.0)
    ts = Encoder(tc, seed=seed + 2).forward(ids, mask)
    ts_eq = Encoder(tc_eq, seed=seed + 2).forward(ids, mask)
    proj = init_projection(tc.hidden_dim, sc.hidden_dim, seed + 3)

    def logit(ss):
        v, dz = logit_kd_loss(ss.logits, ts.logits, y, cfg.alpha, cfg.temperature)
        return v, StateGrads(logits=dz)

    fns = {
        "ckd_wr": lambda ss: ckd_wr_loss(ss, ts, al, cfg)[:2],
        "ckd_ltr": lambda ss: ckd_ltr_loss(ss, ts, al, cfg)[:2],
        "logit_kd": logit,
        "total": lambda ss: total_objective(ss, ts, y, al, cfg)[:2],
        "distilbert": lambda ss: distilbert_cos_loss(ss, ts_eq, al),
        "pkd": lambda ss: pkd_patient_loss(ss, ts_eq, al),
        "tinybert": lambda ss: tinybert_loss(ss, ts, al, proj)[:2],
        "minilm": lambda ss: minilm_loss(ss, ts),
    }
    for name in names:
        fn = fns[name]
        ss = student.forward(ids, mask)
        _, up = fn(ss)
        grads = student.backward(ss, up)
        yield name, gradcheck(lambda: fn(student.forward(ids, mask))[0], student.params, grads,
                              max_coords=max_coords, seed=seed)
