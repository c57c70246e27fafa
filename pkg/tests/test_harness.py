import json

import numpy as np
import pytest

from ckd.baselines import ConstraintViolation
from ckd.gradcheck import gradcheck
from ckd.harness import (RunRecord, TrainConfig, ablation_suite, distill, objective_loss, rerun, train_teacher,
                         window_sweep, write_csv)
from ckd.losses import DistillConfig, align_layers, total_objective
from ckd.model import Encoder, ModelConfig
from ckd.tasks import TaskSpec, generate_task

SPEC = TaskSpec(seq_len=18, n_train=96, n_dev=64, n_test=32, seed=1)
TEACHER = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=24, max_seq_len=18,
                      num_classes=4)
STUDENT = ModelConfig(num_layers=1, hidden_dim=8, num_heads=1, ffn_dim=16, vocab_size=24, max_seq_len=18,
                      num_classes=4)
QUICK = TrainConfig(epochs=1, batch_size=16)
DCFG = DistillConfig(delta=4, pair_kind="cosine", lambda_ckd=1.0, lambda_wr=1.0, lambda_ltr=1.0)


@pytest.fixture(scope="module")
def data():
    return generate_task(SPEC)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(data, TEACHER, QUICK, seed=0)[0]


def test_gradcheck_quadratic_is_exact():
    x = np.array([1.0, -2.0, 0.5])
    A = np.diag([1.0, 2.0, 3.0])
    rep = gradcheck(lambda: float(x @ A @ x), {"x": x}, {"x": 2 * A @ x})
    assert rep.max_rel_error < 1e-10


def test_gradcheck_catches_corruption():
    x = np.array([1.0, -2.0, 0.5])
    rep = gradcheck(lambda: float((x ** 3).sum()), {"x": x}, {"x": 3 * x ** 2 * 1.05})
    assert rep.max_rel_error > 1e-2
    assert rep.worst_tensor == "x"


def test_gradcheck_guards():
    with pytest.raises(ValueError):
        gradcheck(lambda: 0.0, {"x": np.zeros(2, dtype=np.float32)}, {"x": np.zeros(2)})
    x = np.zeros(2)
    with pytest.raises(FloatingPointError):
        gradcheck(lambda: float("nan"), {"x": x}, {"x": x})


def test_zero_epoch_teacher_is_at_chance(data):
    _, rec = train_teacher(data, TEACHER, TrainConfig(epochs=0), seed=0)
    assert abs(rec.metrics["dev_acc"] - 0.25) <= 0.05


def test_teacher_run_is_reproducible(data, tmp_path):
    _, a = train_teacher(data, TEACHER, QUICK, seed=3, out_dir=tmp_path)
    assert (tmp_path / "teacher.ckpt").exists()
    b = RunRecord.load(tmp_path / "record.json")
    assert b.metrics == a.metrics
    assert rerun(b).metrics == a.metrics


def test_distill_refuses_before_training(teacher, data, tmp_path):
    for obj in ("distilbert_cos", "pkd_patient", "tinybert", "minilm"):
        with pytest.raises(ConstraintViolation):
            distill(teacher, STUDENT, obj, DCFG, data, QUICK, 0, tmp_path / obj)
        assert not (tmp_path / obj).exists()


def test_distill_stream_and_record(teacher, data, tmp_path):
    _, rec = distill(teacher, STUDENT, "ckd", DCFG, data, QUICK, 0, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "losses.jsonl").read_text().splitlines()]
    assert len(lines) == QUICK.total_steps(SPEC.n_train)
    for row in lines:
        assert row["schema"] == "ckd.losses/1"
        assert abs(row["L_total"] - row["L_logit"] - DCFG.lambda_ckd * (row["L_WR"] + row["L_LTR"])) < 1e-9
    again = rerun(RunRecord.load(tmp_path / "record.json"), teacher)
    assert again.metrics == rec.metrics
    with pytest.raises(ValueError):
        rerun(rec, Encoder(TEACHER, seed=99))


def test_baselines_run_when_compatible(data):
    t = train_teacher(data, TEACHER, TrainConfig(epochs=0.2, batch_size=16), seed=0)[0]
    same_d = ModelConfig(num_layers=1, hidden_dim=16, num_heads=2, ffn_dim=16, vocab_size=24, max_seq_len=18,
                         num_classes=4)
    for obj in ("distilbert_cos", "pkd_patient", "tinybert", "minilm"):
        _, rec = distill(t, same_d, obj, DCFG, data, TrainConfig(epochs=0.2, batch_size=16), 0)
        assert np.isfinite(rec.metrics["final_loss"])


def test_logit_only_matches_lambda_zero(teacher, data):
    a = distill(teacher, STUDENT, "logit_only", DCFG, data, QUICK, 5)[1]
    b = distill(teacher, STUDENT, "ckd", DistillConfig(lambda_ckd=0.0), data, QUICK, 5)[1]
    assert [r["L_total"] for r in a.history] == [r["L_total"] for r in b.history]
    assert a.metrics == b.metrics


def test_copied_teacher_stays_at_fixed_point(teacher, data):
    # pure soft targets: with hard labels the CE term alone would move the copy
    cfg = DistillConfig(delta=4, lambda_ckd=1.0, alpha=1.0)
    _, rec = distill(teacher, TEACHER, "ckd", cfg, data, TrainConfig(epochs=0.5, batch_size=16), 0, init=teacher)
    assert rec.history[0]["L_WR"] == 0.0 and rec.history[0]["L_LTR"] == 0.0
    assert max(max(r["L_WR"], r["L_LTR"]) for r in rec.history) <= 1e-6


def test_objective_loss_ckd_matches_total(teacher, data):
    s = Encoder(STUDENT, seed=0)
    ids, mask, y = data.dev.batch(slice(0, 8))
    ss, ts = s.forward(ids, mask), teacher.forward(ids, mask)
    al = align_layers(2, 1)
    v, _, parts, _ = objective_loss("ckd", ss, ts, y, al, DCFG)
    assert v == total_objective(ss, ts, y, al, DCFG)[0]
    with pytest.raises(ValueError):
        objective_loss("bogus", ss, ts, y, al, DCFG)


def test_ablation_cells(teacher, data, tmp_path):
    tiny = TrainConfig(epochs=0.35, batch_size=16)
    rows = ablation_suite(teacher, STUDENT, data, DCFG, tiny, seeds=(0, 1), out_dir=tmp_path)
    assert [r["cell"] for r in rows] == ["CKD", "-WR", "-LTR", "-WR-LTR"]
    assert all(len(r["dev_acc"]) == 2 for r in rows)
    logit = [distill(teacher, STUDENT, "logit_only", DCFG, data, tiny, s)[1].metrics["dev_acc"] for s in (0, 1)]
    assert rows[-1]["dev_acc"] == logit
    write_csv(tmp_path / "t.csv", rows, "ckd.ablation/1")
    assert (tmp_path / "t.csv").read_text().startswith("# schema: ckd.ablation/1\n")


def test_window_sweep_rows(teacher, data):
    rows = window_sweep(teacher, STUDENT, data, DCFG, TrainConfig(epochs=0.2, batch_size=16), [0, 2], seeds=(0,))
    assert [r["delta"] for r in rows] == [0, 2]


def test_window_zero_has_no_triples(teacher, data):
    s = Encoder(STUDENT, seed=0)
    ids, mask, y = data.dev.batch(slice(0, 4))
    _, _, parts = total_objective(s.forward(ids, mask), teacher.forward(ids, mask), y, align_layers(2, 1),
                                  DistillConfig(delta=0))
    assert parts["L_WR_triple"] == 0.0


def test_full_window_equals_unwindowed(teacher, data):
    s = Encoder(STUDENT, seed=0)
    ids, mask, y = data.dev.batch(slice(0, 4))
    ss, ts = s.forward(ids, mask), teacher.forward(ids, mask)
    al = align_layers(2, 1)
    a = total_objective(ss, ts, y, al, DistillConfig(delta=SPEC.seq_len))[0]
    b = total_objective(ss, ts, y, al, DistillConfig(delta=None))[0]
    assert a == pytest.approx(b, rel=1e-14)
