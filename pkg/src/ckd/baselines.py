"""Baseline distillation objectives and the architectural constraints they
impose on the student.

Each loss returns only its intermediate-representation terms; the logit
distillation term every objective carries is added by the training loop.
"""

from __future__ import annotations

import numpy as np

from .losses import LayerAlignment
from .model import LayerStates, ModelConfig, StateGrads, softmax
from .relations import EPS

EMBED = "Embedding size"
HEADS = "Attention head"

OBJECTIVES = ("distilbert_cos", "pkd_patient", "tinybert", "minilm", "logit_only", "ckd")

CONSTRAINTS = {
    "distilbert_cos": "requires_equal_embed",
    "pkd_patient": "requires_equal_embed",
    "tinybert": "requires_equal_heads",
    "minilm": "requires_equal_heads",
    "logit_only": "none",
    "ckd": "none",
}


class ConstraintViolation(ValueError):
    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        super().__init__(f"{constraint} constraint violated" + (f": {detail}" if detail else ""))


def check_compatibility(teacher: ModelConfig, student: ModelConfig, objective: str) -> list[str]:
    """Every constraint the objective imposes that the pair violates (empty = ok)."""
    if objective not in CONSTRAINTS:
        raise ValueError(f"unknown objective {objective!r}")
    rule = CONSTRAINTS[objective]
    out = []
    if rule == "requires_equal_embed" and teacher.hidden_dim != student.hidden_dim:
        out.append(EMBED)
    if rule == "requires_equal_heads" and teacher.num_heads != student.num_heads:
        out.append(HEADS)
    return out


def compatibility_matrix(teacher: ModelConfig, students: list[ModelConfig]) -> list[dict]:
    rows = []
    for s in students:
        row = {"student": s.short(), "heads": s.num_heads}
        for obj in OBJECTIVES:
            v = check_compatibility(teacher, s, obj)
            row[obj] = "ok" if not v else "/".join(v)
        rows.append(row)
    return rows


def _require_embed(student, teacher):
    ds, dt = student.reps[0].shape[-1], teacher.reps[0].shape[-1]
    if ds != dt:
        raise ConstraintViolation(EMBED, f"student {ds} vs teacher {dt}")


def _require_heads(student, teacher):
    hs, ht = student.attn[-1].shape[1], teacher.attn[-1].shape[1]
    if hs != ht:
        raise ConstraintViolation(HEADS, f"student {hs} vs teacher {ht}")


def _token_weights(mask):
    """(B, n) weights: mean over real tokens per sequence, then over batch."""
    mask = np.asarray(mask, dtype=float)
    return mask / (mask.sum(1, keepdims=True) * mask.shape[0])


def _normalize(X):
    nrm = np.sqrt((X * X).sum(-1, keepdims=True))
    inv = np.where(nrm > EPS, 1.0 / np.maximum(nrm, EPS), 0.0)
    return X * inv, inv


def _normalize_backward(dY, Y, inv):
    return (dY - Y * (dY * Y).sum(-1, keepdims=True)) * inv


def distilbert_cos_loss(student: LayerStates, teacher: LayerStates, alignment: LayerAlignment):
    """Sum over aligned layers of the token-averaged ``1 - cos(r_t, r_s)``."""
    _require_embed(student, teacher)
    w = _token_weights(student.mask)
    grads = StateGrads()
    value = 0.0
    for s, t in alignment.pairs:
        ys, inv = _normalize(student.reps[s])
        yt, _ = _normalize(teacher.reps[t])
        cos = (ys * yt).sum(-1)
        value += float((w * (1.0 - cos)).sum())
        g = _normalize_backward(-w[..., None] * yt, ys, inv)
        grads.reps[s] = grads.reps.get(s, 0.0) + g
    return value, grads


def pkd_patient_loss(student: LayerStates, teacher: LayerStates, alignment: LayerAlignment):
    """Sum over aligned layers of the MSE between unit-normalised vectors."""
    _require_embed(student, teacher)
    w = _token_weights(student.mask)
    d = student.reps[0].shape[-1]
    grads = StateGrads()
    value = 0.0
    for s, t in alignment.pairs:
        ys, inv = _normalize(student.reps[s])
        yt, _ = _normalize(teacher.reps[t])
        diff = ys - yt
        value += float((w * (diff * diff).sum(-1)).sum()) / d
        g = _normalize_backward(2.0 * diff * w[..., None] / d, ys, inv)
        grads.reps[s] = grads.reps.get(s, 0.0) + g
    return value, grads


def init_projection(d_teacher: int, d_student: int, rng=None) -> np.ndarray:
    """``(d_teacher, d_student)`` map: identity when the sizes agree, else
    orthonormal columns/rows drawn at random."""
    if d_teacher == d_student:
        return np.eye(d_teacher)
    rng = np.random.default_rng(rng)
    big, small = max(d_teacher, d_student), min(d_teacher, d_student)
    q, _ = np.linalg.qr(rng.normal(size=(big, small)))
    return q if d_teacher >= d_student else q.T


def _attn_weights(mask, heads):
    """(B, 1, n, n) weights over real (query, key) cells, averaged per head."""
    m = np.asarray(mask, dtype=float)
    cells = m[:, :, None] * m[:, None, :]
    return (cells / (cells.sum((1, 2), keepdims=True) * m.shape[0] * heads))[:, None]


def tinybert_loss(student: LayerStates, teacher: LayerStates, alignment: LayerAlignment, proj):
    """Projected hidden-state MSE plus per-head attention-map MSE.

    ``proj`` is the ``(d_t, d_s)`` map ``W_r``. Returns
    ``(value, grads, grad_proj)``.
    """
    _require_heads(student, teacher)
    proj = np.asarray(proj, dtype=float)
    dt = teacher.reps[0].shape[-1]
    if proj.shape != (dt, student.reps[0].shape[-1]):
        raise ValueError("projection has the wrong shape")
    w = _token_weights(student.mask)
    grads = StateGrads()
    gproj = np.zeros_like(proj)
    value = 0.0
    h = student.attn[-1].shape[1]
    aw = _attn_weights(student.mask, h)
    for s, t in alignment.pairs:
        diff = teacher.reps[t] - student.reps[s] @ proj.T
        value += float((w * (diff * diff).sum(-1)).sum()) / dt
        gd = -2.0 * diff * w[..., None] / dt  # d value / d (W r_s)
        grads.reps[s] = grads.reps.get(s, 0.0) + gd @ proj
        gproj += gd.reshape(-1, dt).T @ student.reps[s].reshape(-1, proj.shape[1])
        if s > 0 and t > 0:
            da = student.attn[s - 1] - teacher.attn[t - 1]
            value += float((aw * da * da).sum())
            grads.attn[s - 1] = grads.attn.get(s - 1, 0.0) + 2.0 * aw * da
    return value, grads, gproj


def _kl_rows(pt, ps, weight):
    """sum(weight * KL(pt || ps)) over rows, skipping zero-probability cells,
    and its gradient w.r.t. ``ps``."""
    live = pt > 0.0
    safe_ps = np.where(live, ps, 1.0)
    safe_pt = np.where(live, pt, 1.0)
    kl = np.where(live, pt * (np.log(safe_pt) - np.log(safe_ps)), 0.0).sum(-1)
    val = float((weight * kl).sum())
    return val, np.where(live, -pt / safe_ps, 0.0) * weight[..., None]


def minilm_loss(student: LayerStates, teacher: LayerStates):
    """Last-layer attention KL plus value-relation KL, averaged over heads and
    real query rows."""
    _require_heads(student, teacher)
    mask = np.asarray(student.mask, dtype=bool)
    B, n = mask.shape
    h = student.attn[-1].shape[1]
    rows = mask.astype(float)[:, None, :] / (mask.sum(1)[:, None, None] * B * h)
    rows = np.broadcast_to(rows, (B, h, n))
    last = len(student.attn) - 1
    grads = StateGrads()

    v_att, g_att = _kl_rows(teacher.attn[-1], student.attn[-1], rows)
    grads.attn[last] = g_att

    bias = np.where(mask, 0.0, -1e30)[:, None, None, :]

    def value_relation(V):
        scale = 1.0 / np.sqrt(V.shape[-1])
        return softmax(V @ V.transpose(0, 1, 3, 2) * scale + bias, -1), scale

    Pt, _ = value_relation(teacher.values[-1])
    Vs = student.values[-1]
    Ps, scale = value_relation(Vs)
    v_val, dPs = _kl_rows(Pt, Ps, rows)
    dS = Ps * (dPs - (dPs * Ps).sum(-1, keepdims=True))
    grads.values[last] = (dS + dS.transpose(0, 1, 3, 2)) @ Vs * scale
    return v_att + v_val, grads
