"""Training loops, run records and experiment presets."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import (ConstraintViolation, check_compatibility, distilbert_cos_loss, init_projection,
                        minilm_loss, pkd_patient_loss, tinybert_loss)
from .checkpoint import fingerprint, save_model
from .losses import DistillConfig, align_layers, cross_entropy, logit_kd_loss, total_objective
from .model import Encoder, ModelConfig, StateGrads
from .optim import Adam
from .tasks import Dataset, Split, TaskSpec, generate_task

log = logging.getLogger(__name__)

RUN_SCHEMA = "ckd.run/1"
STREAM_SCHEMA = "ckd.losses/1"
STREAM_KEYS = ("L_total", "L_logit", "L_WR_pair", "L_WR_triple", "L_LTR_pair", "L_LTR_triple", "L_WR", "L_LTR")
ABLATION_CELLS = {"CKD": (True, True), "-WR": (False, True), "-LTR": (True, False), "-WR-LTR": (False, False)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: float = 3.0
    batch_size: int = 32
    lr: float = 1e-3
    warmup: float = 0.1
    beta1: float = 0.0
    beta2: float = 0.999
    weight_decay: float = 0.0
    eval_batch: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    def total_steps(self, n_train: int) -> int:
        per_epoch = -(-n_train // self.batch_size)
        return max(1, int(round(self.epochs * per_epoch)))


@dataclass
class RunRecord:
    command: str
    config: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    schema: str = RUN_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        if d.get("schema") != RUN_SCHEMA:
            raise ValueError(f"{path}: unknown run record schema {d.get('schema')!r}")
        return cls(**d)


class LossStream:
    """JSON-lines writer for per-step loss breakdowns (file optional)."""

    def __init__(self, path=None):
        self.fh = open(path, "w") if path else None
        self.rows: list = []

    def write(self, step: int, parts: dict) -> None:
        row = {"schema": STREAM_SCHEMA, "step": step}
        row.update({k: float(parts.get(k, 0.0)) for k in STREAM_KEYS})
        for k in sorted(parts):
            if k not in row:
                row[k] = float(parts[k])
        self.rows.append(row)
        if self.fh:
            self.fh.write(json.dumps(row) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


def batches(n_items: int, batch_size: int, total_steps: int, rng: np.random.Generator):
    """Shuffled minibatch indices, reshuffled every epoch."""
    step, perm, pos = 0, rng.permutation(n_items), 0
    while step < total_steps:
        if pos >= n_items:
            perm, pos = rng.permutation(n_items), 0
        yield perm[pos:pos + batch_size]
        pos += batch_size
        step += 1


def accuracy(model: Encoder, split: Split, batch: int = 256, **forward_kw) -> float:
    hit = tot = 0
    for s in range(0, len(split), batch):
        ids, mask, y = split.batch(slice(s, s + batch))
        pred = model.forward(ids, mask, **forward_kw).logits.argmax(-1)
        if y.ndim == 2:
            keep = mask & (y >= 0)
            hit += int((pred == y)[keep].sum())
            tot += int(keep.sum())
        else:
            hit += int((pred == y).sum())
            tot += len(y)
    return hit / tot


def _check_finite(value, step):
    if not np.isfinite(value):
        raise FloatingPointError(f"loss diverged at step {step}: {value}")


def train_teacher(data: Dataset, config: ModelConfig, tcfg: TrainConfig, seed: int, out_dir=None):
    """Fine-tune a model on the task with cross-entropy. Returns ``(model, record)``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = Encoder(config, seed=int(rng.integers(2**31)))
    drop_rng = np.random.default_rng(int(rng.integers(2**31)))
    steps = tcfg.total_steps(len(data.train))
    opt = Adam(tcfg.lr, steps, tcfg.warmup, tcfg.beta1, tcfg.beta2, weight_decay=tcfg.weight_decay)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    stream = LossStream(out / "losses.jsonl" if out else None)
    if tcfg.epochs > 0:
        for step, idx in enumerate(batches(len(data.train), tcfg.batch_size, steps, rng), 1):
            ids, mask, y = data.train.batch(idx)
            st = model.forward(ids, mask, train=True, rng=drop_rng)
            value, dz = cross_entropy(st.logits, y, mask)
            _check_finite(value, step)
            opt.step(model.params, model.backward(st, StateGrads(logits=dz)))
            stream.write(step, {"L_total": value, "L_logit": value})
    stream.close()
    metrics = {"dev_acc": accuracy(model, data.dev), "test_acc": accuracy(model, data.test),
               "final_loss": stream.rows[-1]["L_total"] if stream.rows else None}
    record = RunRecord("train-teacher", {"task": data.spec.to_dict(), "model": config.to_dict(),
                                         "train": tcfg.to_dict()}, seed, metrics, stream.rows,
                       time.perf_counter() - t0)
    if out:
        save_model(out / "teacher.ckpt", model, {"seed": seed})
        record.save(out / "record.json")
    log.info("teacher %s seed %d: %s", config.short(), seed, metrics)
    return model, record


def objective_loss(objective: str, student_states, teacher_states, labels, alignment, dcfg: DistillConfig,
                   proj=None):
    """Loss, upstream gradients, breakdown and projection gradient for one batch."""
    if objective == "ckd":
        value, grads, parts = total_objective(student_states, teacher_states, labels, alignment, dcfg)
        return value, grads, parts, None
    l_logit, dz = logit_kd_loss(student_states.logits, teacher_states.logits, labels, dcfg.alpha,
                                dcfg.temperature, student_states.mask)
    grads = StateGrads(logits=dz)
    parts = {"L_logit": l_logit}
    gproj = None
    if objective == "logit_only":
        parts["L_total"] = l_logit
        return l_logit, grads, parts, None
    if objective == "distilbert_cos":
        aux, g = distilbert_cos_loss(student_states, teacher_states, alignment)
    elif objective == "pkd_patient":
        aux, g = pkd_patient_loss(student_states, teacher_states, alignment)
    elif objective == "tinybert":
        aux, g, gproj = tinybert_loss(student_states, teacher_states, alignment, proj)
        gproj = dcfg.lambda_ckd * gproj
    elif objective == "minilm":
        aux, g = minilm_loss(student_states, teacher_states)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    grads.add(g, dcfg.lambda_ckd)
    parts["L_aux"] = aux
    parts["L_total"] = l_logit + dcfg.lambda_ckd * aux
    return parts["L_total"], grads, parts, gproj


def distill(teacher: Encoder, student_config: ModelConfig, objective: str, dcfg: DistillConfig, data: Dataset,
            tcfg: TrainConfig, seed: int, out_dir=None, init: Encoder | None = None):
    """Train a student against a fixed teacher. Returns ``(student, record)``.

    Raises ``ConstraintViolation`` before any step when the objective cannot
    serve this teacher/student pair.
    """
    violations = check_compatibility(teacher.config, student_config, objective)
    if violations:
        raise ConstraintViolation(violations[0], f"{objective} with teacher {teacher.config.short()} "
                                                 f"and student {student_config.short()}")
    alignment = align_layers(teacher.config.num_layers, student_config.num_layers)
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(2**31))
    student = init.copy() if init is not None else Encoder(student_config, seed=init_seed)
    drop_rng = np.random.default_rng(int(rng.integers(2**31)))
    params = dict(student.params)
    proj = None
    if objective == "tinybert":
        proj = init_projection(teacher.config.hidden_dim, student_config.hidden_dim, init_seed)
        params["proj.W_r"] = proj
    steps = tcfg.total_steps(len(data.train))
    opt = Adam(tcfg.lr, steps, tcfg.warmup, tcfg.beta1, tcfg.beta2, weight_decay=tcfg.weight_decay)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    stream = LossStream(out / "losses.jsonl" if out else None)
    for step, idx in enumerate(batches(len(data.train), tcfg.batch_size, steps, rng), 1):
        ids, mask, y = data.train.batch(idx)
        ts = teacher.forward(ids, mask)
        ss = student.forward(ids, mask, train=True, rng=drop_rng)
        value, upstream, parts, gproj = objective_loss(objective, ss, ts, y, alignment, dcfg, proj)
        _check_finite(value, step)
        grads = student.backward(ss, upstream)
        if gproj is not None:
            grads["proj.W_r"] = gproj
        opt.step(params, grads)
        stream.write(step, parts)
    stream.close()
    metrics = {"dev_acc": accuracy(student, data.dev), "test_acc": accuracy(student, data.test),
               "final_loss": stream.rows[-1]["L_total"]}
    record = RunRecord("distill", {"task": data.spec.to_dict(), "teacher": teacher.config.to_dict(),
                                   "teacher_fingerprint": fingerprint(teacher.params),
                                   "init_fingerprint": fingerprint(init.params) if init is not None else None,
                                   "student": student_config.to_dict(), "objective": objective,
                                   "distill": dcfg.to_dict(), "train": tcfg.to_dict()},
                       seed, metrics, stream.rows, time.perf_counter() - t0)
    if out:
        save_model(out / "student.ckpt", student, {"seed": seed, "objective": objective})
        record.save(out / "record.json")
    log.info("distill %s -> %s [%s] seed %d: %s", teacher.config.short(), student_config.short(), objective,
             seed, metrics)
    return student, record


def ablation_suite(teacher: Encoder, student_config: ModelConfig, data: Dataset, dcfg: DistillConfig,
                   tcfg: TrainConfig, seeds=(0, 1, 2, 3), out_dir=None):
    """Distil with each of {CKD, -WR, -LTR, -WR-LTR} over several seeds."""
    rows = []
    for cell, (wr, ltr) in ABLATION_CELLS.items():
        cfg = replace(dcfg, use_wr=wr, use_ltr=ltr)
        accs = []
        for s in seeds:
            sub = Path(out_dir) / f"{cell}_seed{s}" if out_dir else None
            _, rec = distill(teacher, student_config, "ckd", cfg, data, tcfg, s, sub)
            accs.append(rec.metrics["dev_acc"])
        rows.append({"cell": cell, "seeds": list(seeds), "dev_acc": accs, "mean_dev_acc": float(np.mean(accs))})
    return rows


def window_sweep(teacher: Encoder, student_config: ModelConfig, data: Dataset, dcfg: DistillConfig,
                 tcfg: TrainConfig, deltas, seeds=(0, 1, 2, 3), out_dir=None):
    """Mean dev accuracy of CKD students per locality window."""
    rows = []
    for delta in deltas:
        cfg = replace(dcfg, delta=int(delta))
        accs = []
        for s in seeds:
            sub = Path(out_dir) / f"delta{delta}_seed{s}" if out_dir else None
            _, rec = distill(teacher, student_config, "ckd", cfg, data, tcfg, s, sub)
            accs.append(rec.metrics["dev_acc"])
        rows.append({"delta": int(delta), "seeds": list(seeds), "dev_acc": accs, "mean_dev_acc": float(np.mean(accs))})
    return rows


def rerun(record: RunRecord, teacher: Encoder | None = None, init: Encoder | None = None) -> RunRecord:
    """Repeat a training run from its record's config and seed."""
    c = record.config
    data = generate_task(TaskSpec(**c["task"]))
    tcfg = TrainConfig(**c["train"])
    if record.command == "train-teacher":
        return train_teacher(data, ModelConfig.from_dict(c["model"]), tcfg, record.seed)[1]
    if record.command == "distill":
        if teacher is None or fingerprint(teacher.params) != c["teacher_fingerprint"]:
            raise ValueError("rerun needs the teacher the record was distilled from")
        if c.get("init_fingerprint") and (init is None or fingerprint(init.params) != c["init_fingerprint"]):
            raise ValueError("rerun needs the student initialisation the record started from")
        return distill(teacher, ModelConfig.from_dict(c["student"]), c["objective"], DistillConfig(**c["distill"]),
                       data, tcfg, record.seed, init=init)[1]
    raise ValueError(f"cannot rerun a {record.command!r} record")


def write_csv(path, rows: list, schema: str) -> None:
    """CSV with a leading ``# schema:`` comment line."""
    if not rows:
        raise ValueError("no rows")
    keys = list(rows[0])
    lines = [f"# schema: {schema}", ",".join(keys)]
    for r in rows:
        cells = []
        for k in keys:
            v = r[k]
            cells.append(";".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
