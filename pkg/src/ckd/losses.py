"""Contextual distillation objectives: word relations, layer-transforming
relations, logit distillation and their combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from math import gcd

import numpy as np

from .model import LayerStates, StateGrads, log_softmax, softmax
from .relations import pair_mask, pair_matrix, pair_matrix_backward, triple_window, triple_window_backward

MATCH_KINDS = ("l1", "l2", "huber")
HUBER_DELTA = 1.0


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    lambda_wr: float = 10.0
    lambda_ltr: float = 10.0
    lambda_ckd: float = 100.0
    alpha: float = 0.9
    temperature: float = 4.0
    delta: int | None = 16  # None: whole sequence
    match_kind: str = "huber"
    pair_kind: str = "l2"
    pair_window: bool = True
    use_wr: bool = True
    use_ltr: bool = True

    def __post_init__(self):
        if min(self.lambda_wr, self.lambda_ltr, self.lambda_ckd) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.match_kind not in MATCH_KINDS:
            raise ValueError(f"match_kind must be one of {MATCH_KINDS}")
        if self.pair_kind not in ("cosine", "l2"):
            raise ValueError("pair_kind must be 'cosine' or 'l2'")
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def window(self, n: int) -> int:
        return n if self.delta is None else int(self.delta)


@dataclass(frozen=True)
class LayerAlignment:
    pairs: tuple  # ((student_index, teacher_index), ...); 0 is the embedding output
    g: int
    step_t: int
    step_s: int

    @property
    def student(self):
        return [s for s, _ in self.pairs]

    @property
    def teacher(self):
        return [t for _, t in self.pairs]

    def as_dict(self) -> dict:
        return dict(self.pairs)


def align_layers(num_teacher: int, num_student: int) -> LayerAlignment:
    """Uniform (skip) layer map: student ``step_s * t`` -> teacher ``step_t * t``."""
    if num_student < 1 or num_teacher < 1:
        raise ValueError("layer counts must be positive")
    if num_student > num_teacher:
        raise UnsupportedConfiguration(f"student deeper than teacher ({num_student} > {num_teacher})")
    g = gcd(num_teacher, num_student)
    st, ss = num_teacher // g, num_student // g
    return LayerAlignment(tuple((ss * t, st * t) for t in range(g + 1)), g, st, ss)


# -- matching kernel ---------------------------------------------------------------

def match_elementwise(a, b, kind: str = "huber"):
    """Elementwise discrepancy and its derivative w.r.t. ``a``."""
    r = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if kind == "l2":
        return r * r, 2.0 * r
    if kind == "l1":
        return np.abs(r), np.sign(r)
    if kind == "huber":
        g = np.clip(r, -HUBER_DELTA, HUBER_DELTA)
        # 0.5 r^2 inside the threshold, delta * (|r| - delta / 2) outside
        return g * (r - 0.5 * g), g
    raise ValueError(f"unknown match kind {kind!r}")


def match_loss(a, b, kind: str = "huber") -> float:
    """Mean elementwise l1, squared-l2 or Huber (threshold 1) discrepancy."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(match_elementwise(a, b, kind)[0].mean())


# -- relation matching --------------------------------------------------------------

def _masked_match(vs, vt, mask, item_weight, kind):
    """``sum_items w_b * mean_{mask}(l(vs, vt))`` and its gradient on ``vs``."""
    axes = tuple(range(1, vs.ndim))
    cnt = mask.sum(axis=axes)
    scale = np.where(cnt > 0, item_weight / np.maximum(cnt, 1), 0.0)
    val, dval = match_elementwise(vs, vt, kind)
    per_item = np.where(mask, val, 0.0).sum(axis=axes)
    shape = (-1,) + (1,) * (vs.ndim - 1)
    return float((per_item * scale).sum()), np.where(mask, dval, 0.0) * scale.reshape(shape)


def relation_match(Xs, Xt, valid, delta, item_weight, cfg: DistillConfig, lam_triple: float,
                   pair: bool = True, triple: bool = True):
    """Pair and triple relation matching between two point sets.

    ``Xs`` (B, n, ds) and ``Xt`` (B, n, dt) share positions; ``item_weight``
    (B,) weighs each item's masked average. Returns ``(pair_term,
    triple_term, grad_Xs)`` where the gradient is that of
    ``pair_term + lam_triple * triple_term``.
    """
    B, n, _ = Xs.shape
    dXs = np.zeros_like(Xs)
    p_term = t_term = 0.0
    if pair and n >= 2:
        ps, pcache = pair_matrix(Xs, cfg.pair_kind)
        pt, _ = pair_matrix(Xt, cfg.pair_kind)
        pm = pair_mask(valid, delta if cfg.pair_window else None)
        p_term, G = _masked_match(ps, pt, pm, item_weight, cfg.match_kind)
        dXs += pair_matrix_backward(G, Xs, pcache)
    if triple and n >= 3 and delta >= 1:
        ts, tm, tcache = triple_window(Xs, valid, delta)
        tt, _, _ = triple_window(Xt, valid, delta)
        t_term, G = _masked_match(ts, tt, tm, item_weight, cfg.match_kind)
        if lam_triple != 0.0:
            dXs += lam_triple * triple_window_backward(G, tcache)
    return p_term, t_term, dXs


def _check_pair(student: LayerStates, teacher: LayerStates):
    if student.reps[0].shape[:2] != teacher.reps[0].shape[:2]:
        raise ValueError("teacher and student states come from different sequence shapes")
    if not np.array_equal(student.mask, teacher.mask):
        raise ValueError("teacher and student masks differ")


def _check_alignment(student, teacher, alignment):
    if alignment.student[-1] > student.num_layers or alignment.teacher[-1] > teacher.num_layers:
        raise ValueError("alignment refers to layers the states do not have")


def ckd_wr_loss(student: LayerStates, teacher: LayerStates, alignment: LayerAlignment, cfg: DistillConfig):
    """Word-relation loss summed over aligned layers.

    Returns ``(value, grads, parts)`` with ``value = pair + lambda_wr * triple``.
    """
    _check_pair(student, teacher)
    _check_alignment(student, teacher, alignment)
    valid = student.mask
    B, n = valid.shape
    delta = cfg.window(n)
    w = np.full(B, 1.0 / B)
    grads = StateGrads()
    pair_sum = triple_sum = 0.0
    for s, t in alignment.pairs:
        p, tr, d = relation_match(student.reps[s], teacher.reps[t], valid, delta, w, cfg, cfg.lambda_wr)
        pair_sum += p
        triple_sum += tr
        grads.reps[s] = grads.reps[s] + d if s in grads.reps else d
    value = pair_sum + cfg.lambda_wr * triple_sum
    return value, grads, {"pair": pair_sum, "triple": triple_sum}


def ckd_ltr_loss(student: LayerStates, teacher: LayerStates, alignment: LayerAlignment, cfg: DistillConfig):
    """Layer-transforming-relation loss over every word's aligned trajectory.

    All trajectory weights are 1. Returns ``(value, grads, parts)``.
    """
    _check_pair(student, teacher)
    _check_alignment(student, teacher, alignment)
    valid = student.mask
    B, n = valid.shape
    rho = len(alignment.pairs)
    grads = StateGrads()
    if rho < 2:
        return 0.0, grads, {"pair": 0.0, "triple": 0.0}
    Ts = np.stack([student.reps[s] for s in alignment.student], axis=2)  # (B, n, rho, ds)
    Tt = np.stack([teacher.reps[t] for t in alignment.teacher], axis=2)
    words = valid.reshape(-1)
    Xs = Ts.reshape(B * n, rho, -1)[words]
    Xt = Tt.reshape(B * n, rho, -1)[words]
    per_seq = valid.sum(1)
    w = np.repeat(1.0 / (B * per_seq), per_seq)
    traj_valid = np.ones(Xs.shape[:2], dtype=bool)
    p, tr, d = relation_match(Xs, Xt, traj_valid, rho - 1, w, cfg, cfg.lambda_ltr, triple=rho >= 3)
    full = np.zeros((B * n, rho, Ts.shape[-1]))
    full[words] = d
    full = full.reshape(B, n, rho, -1)
    for q, s in enumerate(alignment.student):
        grads.reps[s] = grads.reps[s] + full[:, :, q] if s in grads.reps else full[:, :, q].copy()
    return p + cfg.lambda_ltr * tr, grads, {"pair": p, "triple": tr}


def _flatten_logits(z, mask):
    z = np.asarray(z, dtype=float)
    if z.ndim == 3:  # token-level
        return z.reshape(-1, z.shape[-1]), np.asarray(mask, dtype=bool).reshape(-1)
    return z, np.ones(z.shape[0], dtype=bool)


def logit_kd_loss(zs, zt, labels, alpha: float, temperature: float, mask=None):
    """``alpha * T^2 * SCE(p_t^T, p_s^T) + (1 - alpha) * CE(z_s, y)``, averaged
    over examples (or real tokens for token-level logits).

    Returns ``(value, grad_zs)``.
    """
    zs = np.asarray(zs, dtype=float)
    zt = np.asarray(zt, dtype=float)
    if zs.shape != zt.shape:
        raise ValueError("student and teacher logits differ in shape")
    fs, keep = _flatten_logits(zs, mask)
    ft, _ = _flatten_logits(zt, mask)
    T = float(temperature)
    C = fs.shape[-1]
    w = keep / keep.sum()
    value = 0.0
    grad = np.zeros_like(fs)
    if alpha > 0.0:
        log_ps = log_softmax(fs / T)
        pt = softmax(ft / T)
        sce = -(pt * log_ps).sum(-1)
        value += alpha * T * T * float((w * sce).sum())
        # same routine on both sides so identical logits give an exactly zero gradient
        grad += alpha * T * (softmax(fs / T) - pt) * w[:, None]
    if alpha < 1.0:
        if labels is None:
            raise ValueError("hard-label term needs labels")
        y = np.asarray(labels).reshape(-1)
        if y.shape[0] != fs.shape[0]:
            raise ValueError("labels do not match logits")
        yk = y[keep]
        if yk.size and (yk.min() < 0 or yk.max() >= C):
            raise ValueError("label out of range")
        yc = np.where(keep, y, 0)
        log_p = log_softmax(fs)
        ce = -log_p[np.arange(len(yc)), yc]
        value += (1.0 - alpha) * float((w * ce).sum())
        onehot = np.eye(C)[yc]
        grad += (1.0 - alpha) * (np.exp(log_p) - onehot) * w[:, None]
    return value, grad.reshape(zs.shape)


def cross_entropy(z, labels, mask=None):
    return logit_kd_loss(z, z, labels, 0.0, 1.0, mask)


def total_objective(student: LayerStates, teacher: LayerStates, labels, alignment: LayerAlignment,
                    cfg: DistillConfig):
    """``L_logit + lambda_ckd * (L_LTR + L_WR)``.

    Returns ``(value, grads, breakdown)``; ``breakdown`` has the keys of the
    per-step loss record.
    """
    mask = student.mask
    l_logit, dz = logit_kd_loss(student.logits, teacher.logits, labels, cfg.alpha, cfg.temperature, mask)
    grads = StateGrads(logits=dz)
    parts = {"L_logit": l_logit, "L_WR": 0.0, "L_WR_pair": 0.0, "L_WR_triple": 0.0,
             "L_LTR": 0.0, "L_LTR_pair": 0.0, "L_LTR_triple": 0.0}
    ckd = 0.0
    if cfg.lambda_ckd != 0.0 and (cfg.use_wr or cfg.use_ltr):
        if cfg.use_ltr:
            v, g, p = ckd_ltr_loss(student, teacher, alignment, cfg)
            parts.update(L_LTR=v, L_LTR_pair=p["pair"], L_LTR_triple=p["triple"])
            ckd += v
            grads.add(g, cfg.lambda_ckd)
        if cfg.use_wr:
            v, g, p = ckd_wr_loss(student, teacher, alignment, cfg)
            parts.update(L_WR=v, L_WR_pair=p["pair"], L_WR_triple=p["triple"])
            ckd += v
            grads.add(g, cfg.lambda_ckd)
    total = l_logit + cfg.lambda_ckd * ckd if ckd else l_logit
    parts["L_total"] = total
    return total, grads, parts
