"""Adaptive width/depth training with contextual distillation.

Three phases: estimate head/neuron importance and rewire so the most
important units come first; train every width multiplier against a fixed
teacher; then train every (width, depth) pair against the width-adaptive
model from phase two. Gradients from all sub-networks of a step are
accumulated before a single optimizer update.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from math import floor

import numpy as np

from .harness import RunRecord, TrainConfig, accuracy, batches
from .losses import DistillConfig, align_layers, cross_entropy, total_objective
from .model import Encoder, LayerStates, StateGrads
from .optim import Adam

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (1.0, 0.75, 0.5, 0.25)
DEFAULT_DEPTHS = (1.0, 0.75, 0.5, 0.25)


def _round(x: float) -> int:
    return int(floor(x + 0.5))


@dataclass(frozen=True)
class SubnetSpec:
    width: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.width <= 1.0 and 0.0 < self.depth <= 1.0):
            raise ValueError("width and depth multipliers must lie in (0, 1]")

    def heads(self, config) -> int:
        return _round(self.width * config.num_heads)

    def neurons(self, config) -> int:
        return _round(self.width * config.ffn_dim)

    def layers(self, config) -> list[int]:
        return depth_layers(config.num_layers, self.depth)


def depth_layers(num_layers: int, depth: float) -> list[int]:
    """Blocks kept at depth multiplier ``depth`` (0-based).

    Block ``round(t * L / L')`` for ``t = 1..L'``; when ``L'`` divides ``L``
    this is exactly the teacher side of ``align_layers(L, L')``.
    """
    keep = _round(depth * num_layers)
    if keep < 1:
        raise ValueError(f"depth {depth} keeps no layer of {num_layers}")
    if keep >= num_layers:
        return list(range(num_layers))
    return [_round(t * num_layers / keep) - 1 for t in range(1, keep + 1)]


@dataclass
class ImportanceScores:
    heads: np.ndarray  # (L, h)
    neurons: np.ndarray  # (L, ffn_dim)


def subnet_forward(model: Encoder, spec: SubnetSpec, ids, mask=None, **kw) -> LayerStates:
    cfg = model.config
    hk, m = spec.heads(cfg), spec.neurons(cfg)
    if hk < 1 or m < 1:
        raise ValueError(f"{spec} keeps no attention head or FFN neuron")
    return model.forward(ids, mask, heads=hk, neurons=m, layers=spec.layers(cfg), **kw)


def subnet_parameter_indices(config, spec: SubnetSpec) -> dict:
    """Flat indices of every parameter entry the sub-network reads."""
    hd = spec.heads(config) * config.head_dim
    m = spec.neurons(config)
    used = {}

    def take(name, shape, sl):
        mask = np.zeros(shape, dtype=bool)
        mask[sl] = True
        used[name] = set(np.flatnonzero(mask).tolist())

    d, f = config.hidden_dim, config.ffn_dim
    take("tok_emb", (config.vocab_size, d), np.s_[:])
    take("pos_emb", (config.max_seq_len, d), np.s_[:])
    keep = set(spec.layers(config))
    for l in range(config.num_layers):
        pre = f"layers.{l}."
        on = l in keep
        for w in ("Wq", "Wk", "Wv"):
            take(pre + w, (d, d), np.s_[:, :hd] if on else np.s_[:0])
            take(pre + "b" + w[1], (d,), np.s_[:hd] if on else np.s_[:0])
        take(pre + "Wo", (d, d), np.s_[:hd] if on else np.s_[:0])
        for name, shape, sl in (("W1", (d, f), np.s_[:, :m]), ("b1", (f,), np.s_[:m]), ("W2", (f, d), np.s_[:m])):
            take(pre + name, shape, sl if on else np.s_[:0])
        for name in ("bo", "ln1_g", "ln1_b", "b2", "ln2_g", "ln2_b"):
            take(pre + name, (d,), np.s_[:] if on else np.s_[:0])
    take("cls_W", (d, config.num_classes), np.s_[:])
    take("cls_b", (config.num_classes,), np.s_[:])
    return used


# -- phase 1 ---------------------------------------------------------------------

def estimate_importance(model: Encoder, split, batch_size: int = 128) -> ImportanceScores:
    """First-order saliency ``|dL/dgate|`` of every head and FFN neuron,
    accumulated over dev batches (``L`` is the task cross-entropy)."""
    if len(split) == 0:
        raise ValueError("importance estimation needs a non-empty dev set")
    cfg = model.config
    heads = np.zeros((cfg.num_layers, cfg.num_heads))
    neurons = np.zeros((cfg.num_layers, cfg.ffn_dim))
    for s in range(0, len(split), batch_size):
        ids, mask, y = split.batch(slice(s, s + batch_size))
        st = model.forward(ids, mask)
        _, dz = cross_entropy(st.logits, y, mask)
        _, hg, ng = model.backward(st, StateGrads(logits=dz), gate_grads=True)
        heads += np.abs(hg)
        neurons += np.abs(ng)
    return ImportanceScores(heads, neurons)


def rewire(model: Encoder, scores: ImportanceScores) -> Encoder:
    """Reorder heads and neurons by descending importance (stable on ties)."""
    cfg = model.config
    if scores.heads.shape != (cfg.num_layers, cfg.num_heads) or scores.neurons.shape != (cfg.num_layers, cfg.ffn_dim):
        raise ValueError("importance scores do not match the model shape")
    head_orders = [np.argsort(-scores.heads[l], kind="stable") for l in range(cfg.num_layers)]
    neuron_orders = [np.argsort(-scores.neurons[l], kind="stable") for l in range(cfg.num_layers)]
    return model.permute(head_orders, neuron_orders)


# -- phases 2 and 3 -------------------------------------------------------------------

def subnet_loss(student: Encoder, spec: SubnetSpec, teacher_states: LayerStates, ids, mask, labels,
                dcfg: DistillConfig):
    """Distillation loss of one sub-network; returns ``(value, param_grads, parts)``."""
    ss = subnet_forward(student, spec, ids, mask)
    alignment = align_layers(teacher_states.num_layers, ss.num_layers)
    value, up, parts = total_objective(ss, teacher_states, labels, alignment, dcfg)
    return value, student.backward(ss, up), parts


def accumulate(student: Encoder, terms, ids, mask, labels, dcfg: DistillConfig):
    """Sum the gradients of every ``(spec, teacher_states)`` term in order."""
    total = student.zero_grads()
    values = []
    for spec, ts in terms:
        v, g, _ = subnet_loss(student, spec, ts, ids, mask, labels, dcfg)
        for k in total:
            total[k] += g[k]
        values.append(v)
    return total, values


def _probe_losses(student, specs_and_teachers, probe, dcfg):
    ids, mask, y = probe
    return [subnet_loss(student, spec, ts_fn(ids, mask), ids, mask, y, dcfg)[0] for spec, ts_fn in specs_and_teachers]


def train_adaptive_width(teacher: Encoder, student: Encoder, width_list, data, dcfg: DistillConfig,
                         tcfg: TrainConfig, seed: int, probe_size: int = 256, probe_split: str = "train"):
    """Phase 2. Returns ``(student, record)``; the record holds per-width probe
    losses at step 0 and at the end, measured on the first ``probe_size``
    examples of ``probe_split``."""
    width_list = list(width_list)
    if not width_list:
        raise ValueError("width list is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    student = student.copy()
    specs = [SubnetSpec(w, 1.0) for w in width_list]
    probe = getattr(data, probe_split).batch(slice(0, probe_size))
    probe_terms = [(s, lambda i, m: teacher.forward(i, m)) for s in specs]
    before = _probe_losses(student, probe_terms, probe, dcfg)
    steps = tcfg.total_steps(len(data.train))
    opt = Adam(tcfg.lr, steps, tcfg.warmup, tcfg.beta1, tcfg.beta2, weight_decay=tcfg.weight_decay)
    history = []
    for step, idx in enumerate(batches(len(data.train), tcfg.batch_size, steps, rng), 1):
        ids, mask, y = data.train.batch(idx)
        ts = teacher.forward(ids, mask)
        grads, values = accumulate(student, [(s, ts) for s in specs], ids, mask, y, dcfg)
        opt.step(student.params, grads)
        history.append({"step": step, **{f"L@w{w}": v for w, v in zip(width_list, values)}})
    after = _probe_losses(student, probe_terms, probe, dcfg)
    metrics = {"probe_loss_start": before, "probe_loss_end": after,
               "dev_acc": {str(w): accuracy(student, data.dev, heads=s.heads(student.config),
                                            neurons=s.neurons(student.config)) for w, s in zip(width_list, specs)}}
    rec = RunRecord("adaptive-width", {"widths": width_list, "distill": dcfg.to_dict(), "train": tcfg.to_dict()},
                    seed, metrics, history, time.perf_counter() - t0)
    return student, rec


def train_adaptive_full(teacher_w: Encoder, student: Encoder, width_list, depth_list, data,
                        dcfg: DistillConfig, tcfg: TrainConfig, seed: int, probe_size: int = 256,
                        probe_split: str = "train"):
    """Phase 3: every (width, depth) sub-network learns from the width-matched
    sub-network of the fixed phase-2 model."""
    width_list, depth_list = list(width_list), list(depth_list)
    if not width_list or not depth_list:
        raise ValueError("width and depth lists must be non-empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    student = student.copy()
    grid = [(w, d) for w in width_list for d in depth_list]
    probe = getattr(data, probe_split).batch(slice(0, probe_size))
    probe_terms = [(SubnetSpec(w, d), lambda i, m, w=w: subnet_forward(teacher_w, SubnetSpec(w, 1.0), i, m))
                   for w, d in grid]
    before = _probe_losses(student, probe_terms, probe, dcfg)
    steps = tcfg.total_steps(len(data.train))
    opt = Adam(tcfg.lr, steps, tcfg.warmup, tcfg.beta1, tcfg.beta2, weight_decay=tcfg.weight_decay)
    history = []
    for step, idx in enumerate(batches(len(data.train), tcfg.batch_size, steps, rng), 1):
        ids, mask, y = data.train.batch(idx)
        terms = []
        for w in width_list:
            ts = subnet_forward(teacher_w, SubnetSpec(w, 1.0), ids, mask)
            terms.extend((SubnetSpec(w, d), ts) for d in depth_list)
        grads, values = accumulate(student, terms, ids, mask, y, dcfg)
        opt.step(student.params, grads)
        history.append({"step": step, **{f"L@w{w}d{d}": v for (w, d), v in zip(grid, values)}})
    after = _probe_losses(student, probe_terms, probe, dcfg)
    metrics = {"probe_loss_start": before, "probe_loss_end": after, "grid": [list(g) for g in grid]}
    rec = RunRecord("adaptive-full", {"widths": width_list, "depths": depth_list, "distill": dcfg.to_dict(),
                                      "train": tcfg.to_dict()}, seed, metrics, history, time.perf_counter() - t0)
    return student, rec


def evaluate_grid(model: Encoder, width_list, depth_list, split) -> list[dict]:
    rows = []
    for w in width_list:
        for d in depth_list:
            spec = SubnetSpec(w, d)
            acc = accuracy(model, split, heads=spec.heads(model.config), neurons=spec.neurons(model.config),
                           layers=spec.layers(model.config))
            rows.append({"width": w, "depth": d, "dev_acc": acc})
    return rows
