"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the summary lines are
printed at the end of the session) or as a script:
``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckd.adaptive import SubnetSpec, estimate_importance, rewire, subnet_loss, subnet_parameter_indices
from ckd.adaptive import accumulate, train_adaptive_width
from ckd.baselines import EMBED, HEADS, OBJECTIVES, ConstraintViolation, check_compatibility
from ckd.bench import bench_relations, linear_r2, loglog_slope
from ckd.harness import TrainConfig, ablation_suite, distill, rerun, train_teacher
from ckd.losses import DistillConfig, UnsupportedConfiguration, align_layers, ckd_ltr_loss, ckd_wr_loss
from ckd.model import LayerStates, ModelConfig
from ckd.relations import triple_angle, windowed_relations
from ckd.tasks import TaskSpec, generate_task
from ckd.verify import CHECKS, gradcheck_suite

RESULTS: dict[int, str] = {}

TASK = TaskSpec("local-pattern", vocab_size=24, seq_len=24, num_classes=4, n_train=4000, n_dev=1000, n_test=1000,
                seed=0)
TEACHER = ModelConfig(num_layers=4, hidden_dim=64, num_heads=4, ffn_dim=256, vocab_size=24, max_seq_len=24,
                      num_classes=4)
STUDENT = ModelConfig(num_layers=2, hidden_dim=32, num_heads=2, ffn_dim=128, vocab_size=24, max_seq_len=24,
                      num_classes=4)
TEACHER_TRAIN = TrainConfig(epochs=3)
STUDENT_TRAIN = TrainConfig(epochs=3)
# Pair relations compared by cosine: raw l2 distances differ in scale between
# a d=64 teacher and a d=32 student and swamp the logit signal.
CKD_CONFIG = DistillConfig(lambda_ckd=1.0, lambda_wr=1.0, lambda_ltr=1.0, pair_kind="cosine")
SEEDS = (0, 1, 2, 3)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"ACCEPTANCE {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n], flush=True)
    assert ok, detail


def _orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _brute(R, valid, delta):
    n = len(R)
    vals, mask = np.zeros((n, n, n)), np.zeros((n, n, n), dtype=bool)
    for i, j, k in itertools.product(range(n), repeat=3):
        if i != j and k != j and valid[i] and valid[j] and valid[k] and abs(i - j) <= delta and abs(k - j) <= delta:
            vals[j, i, k] = triple_angle(R[i], R[j], R[k])
            mask[j, i, k] = True
    return vals, mask


@pytest.fixture(scope="module")
def task():
    return generate_task(TASK)


@pytest.fixture(scope="module")
def teacher_run(task):
    return train_teacher(task, TEACHER, TEACHER_TRAIN, seed=0)


# 1 -----------------------------------------------------------------------------------

def test_01_gradient_correctness():
    t0 = time.perf_counter()
    worst = {name: rep for name, rep in gradcheck_suite(max_coords=None)}
    elapsed = time.perf_counter() - t0
    bad = {k: v.max_rel_error for k, v in worst.items() if not v.max_rel_error < 1e-4}
    top = max(worst.values(), key=lambda r: r.max_rel_error)
    record(1, not bad and elapsed < 120 and set(worst) == set(CHECKS),
           f"{len(worst)} objectives, worst rel err {top.max_rel_error:.2e} ({top.worst_tensor}), "
           f"{elapsed:.0f}s" + (f", failing {bad}" if bad else ""))


# 2 -----------------------------------------------------------------------------------

_COUNT = {"full": 0, "masked": 0, "mismatch": 0}


@settings(max_examples=300, deadline=None, database=None)
@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**31), st.booleans(), st.data())
def _oracle_property(n, d, seed, full, draw):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(n, d))
    valid = np.ones(n, dtype=bool)
    valid[draw.draw(st.integers(1, n)):] = False
    delta = draw.draw(st.integers(max(1, n - 1), n + 3)) if full else draw.draw(st.integers(1, max(1, n - 1)))
    dense, dmask = windowed_relations(R, delta, mask=valid).triple_dense()
    ref, rmask = _brute(R, valid, delta)
    _COUNT["full" if delta >= n - 1 else "masked"] += 1
    if not (np.array_equal(dmask[0], rmask) and np.abs(dense[0] - ref).max(initial=0.0) <= 1e-12):
        _COUNT["mismatch"] += 1
        raise AssertionError(f"mismatch at n={n} d={d} delta={delta}")


def test_02_oracle_equivalence():
    for k in _COUNT:
        _COUNT[k] = 0
    ok, msg = True, ""
    try:
        _oracle_property()
    except AssertionError as e:
        ok, msg = False, str(e).splitlines()[0]
    total = _COUNT["full"] + _COUNT["masked"]
    ok = ok and total >= 200 and _COUNT["full"] > 0 and _COUNT["masked"] > 0
    record(2, ok, f"{total} instances ({_COUNT['full']} full-window, {_COUNT['masked']} masked), tol 1e-12 {msg}")


# 3 -----------------------------------------------------------------------------------

def test_03_zero_loss_fixed_point(task, teacher_run):
    teacher = teacher_run[0]
    ids, mask, _ = task.dev.batch(slice(0, 32))
    ts = teacher.forward(ids, mask)
    al = align_layers(4, 4)
    cfg = DistillConfig()
    exact = [ckd_wr_loss(ts, ts, al, cfg)[0], ckd_ltr_loss(ts, ts, al, cfg)[0]]
    rng = np.random.default_rng(0)
    Q, c = _orthogonal(64, rng), rng.normal(size=64)
    moved = LayerStates([r @ Q + c for r in ts.reps], ts.attn, ts.values, ts.logits, ts.mask, None)
    iso = [ckd_wr_loss(moved, ts, al, cfg)[0], ckd_ltr_loss(moved, ts, al, cfg)[0]]
    record(3, exact == [0.0, 0.0] and max(iso) < 1e-9,
           f"identical: WR={exact[0]} LTR={exact[1]}; isometry (l2 pairs + angles): max {max(iso):.1e}")


# 4 -----------------------------------------------------------------------------------

def test_04_complexity():
    t0 = time.perf_counter()
    ns = [8, 16, 32, 64]
    naive = bench_relations(ns, [1], d=8, variants=("naive",))
    s_naive = loglog_slope(ns, [r["ops"] for r in naive])
    deltas = [2, 4, 8, 16]
    win = bench_relations([256], deltas, d=8, variants=("windowed",))
    s_win = loglog_slope(deltas, [r["ops"] for r in win])
    ns_lin = [32, 64, 128, 256, 512]
    mem = bench_relations(ns_lin, [4], d=8, variants=("windowed",))
    r2 = linear_r2(ns_lin, [r["aux_elements"] for r in mem])
    r2_traced = linear_r2(ns_lin, [r["traced_extra_bytes"] for r in mem])
    elapsed = time.perf_counter() - t0
    ok = abs(s_naive - 3) <= 0.15 and abs(s_win - 2) <= 0.2 and r2 > 0.99 and elapsed < 300
    record(4, ok, f"naive slope {s_naive:.3f} (n), windowed slope {s_win:.3f} (delta), aux memory R2 {r2:.5f} "
                  f"(traced bytes R2 {r2_traced:.4f}), {elapsed:.1f}s")


# 5 -----------------------------------------------------------------------------------

def _cfg(layers, d, h):
    return ModelConfig(num_layers=layers, hidden_dim=d, num_heads=h, ffn_dim=4 * d, vocab_size=8, max_seq_len=8,
                       num_classes=2)


def test_05_constraint_matrix():
    # (teacher, student, expected violation per baseline) written out by hand
    E, H, ok_ = EMBED, HEADS, None
    grid = [
        ((12, 768, 12), (4, 512, 8), E, H),
        ((12, 768, 12), (6, 768, 12), ok_, ok_),
        ((12, 768, 12), (4, 312, 12), E, ok_),
        ((12, 768, 12), (6, 384, 12), E, ok_),
        ((12, 768, 12), (3, 768, 12), ok_, ok_),
        ((12, 768, 12), (4, 768, 8), ok_, H),
        ((24, 1024, 16), (6, 768, 12), E, H),
        ((24, 1024, 16), (12, 1024, 16), ok_, ok_),
        ((24, 1024, 16), (4, 512, 16), E, ok_),
        ((4, 64, 4), (2, 32, 2), E, H),
        ((4, 64, 4), (2, 64, 2), ok_, H),
        ((4, 64, 4), (2, 32, 4), E, ok_),
    ]
    mismatches = []
    for t, s, embed_rule, head_rule in grid:
        tc, sc = _cfg(*t), _cfg(*s)
        expect = {"distilbert_cos": embed_rule, "pkd_patient": embed_rule, "tinybert": head_rule,
                  "minilm": head_rule, "logit_only": None, "ckd": None}
        for obj in OBJECTIVES:
            got = check_compatibility(tc, sc, obj)
            if got != ([] if expect[obj] is None else [expect[obj]]):
                mismatches.append((t, s, obj, got))
    record(5, len(grid) == 12 and not mismatches,
           f"{len(grid)} teacher/student pairs x {len(OBJECTIVES)} objectives" +
           (f", mismatches {mismatches}" if mismatches else ", all match"))


# 6 -----------------------------------------------------------------------------------

def test_06_alignment():
    ok = align_layers(12, 6).as_dict() == {0: 0, 1: 2, 2: 4, 3: 6, 4: 8, 5: 10, 6: 12}
    checked = 0
    for lt in range(1, 25):
        for ls in range(1, lt + 1):
            al = align_layers(lt, ls)
            s, t = al.student, al.teacher
            ok &= al.pairs[0] == (0, 0) and al.pairs[-1] == (ls, lt)
            ok &= all(a < b for a, b in zip(s, s[1:])) and all(a < b for a, b in zip(t, t[1:]))
            ok &= all(ti * ls == si * lt for si, ti in al.pairs)
            checked += 1
        try:
            align_layers(lt, lt + 1)
            ok = False
        except UnsupportedConfiguration:
            pass
    record(6, bool(ok), f"(12,6) -> {{1:2,...,6:12}}; monotone/endpoint/uniform over {checked} pairs L_s<=L_t<=24")


# 7 -----------------------------------------------------------------------------------

def test_07_distillation_outcome(task, teacher_run):
    t0 = time.perf_counter()
    teacher, trec = teacher_run
    refused = []
    for obj in ("distilbert_cos", "pkd_patient", "tinybert", "minilm"):
        try:
            distill(teacher, STUDENT, obj, CKD_CONFIG, task, STUDENT_TRAIN, 0)
        except ConstraintViolation:
            refused.append(obj)
    ckd = [distill(teacher, STUDENT, "ckd", CKD_CONFIG, task, STUDENT_TRAIN, s)[1] for s in SEEDS]
    logit = [distill(teacher, STUDENT, "logit_only", CKD_CONFIG, task, STUDENT_TRAIN, s)[1] for s in SEEDS]
    elapsed = time.perf_counter() - t0 + trec.wall_time
    ckd_acc = [r.metrics["dev_acc"] for r in ckd]
    logit_acc = [r.metrics["dev_acc"] for r in logit]
    m_ckd, m_logit = float(np.mean(ckd_acc)), float(np.mean(logit_acc))
    ok = (trec.metrics["dev_acc"] >= 0.97 and m_ckd >= m_logit - 0.005 and len(refused) == 4 and elapsed < 1200)
    test_07_distillation_outcome.records = (trec, ckd[0])
    record(7, ok, f"teacher dev {trec.metrics['dev_acc']:.3f}; CKD mean {m_ckd:.4f} {ckd_acc} vs logit-only "
                  f"{m_logit:.4f} {logit_acc}; baselines refused: {len(refused)}/4; {elapsed:.0f}s")


# 8 -----------------------------------------------------------------------------------

def test_08_ablation_structure(task, teacher_run):
    teacher = teacher_run[0]
    short = replace(STUDENT_TRAIN, epochs=0.1)
    rows = ablation_suite(teacher, STUDENT, task, CKD_CONFIG, short, seeds=SEEDS)
    cells = [r["cell"] for r in rows]
    logit = [distill(teacher, STUDENT, "logit_only", CKD_CONFIG, task, short, s)[1] for s in SEEDS]
    off = replace(CKD_CONFIG, use_wr=False, use_ltr=False)
    cell_runs = [distill(teacher, STUDENT, "ckd", off, task, short, s)[1] for s in SEEDS]
    same = all(a.history == b.history and a.metrics == b.metrics for a, b in zip(cell_runs, logit))
    same &= rows[-1]["dev_acc"] == [r.metrics["dev_acc"] for r in logit]
    record(8, cells == ["CKD", "-WR", "-LTR", "-WR-LTR"] and all(len(r["dev_acc"]) == 4 for r in rows) and same,
           f"cells {cells} x {len(SEEDS)} seeds ran; -WR-LTR bit-equal to logit-only: {same}; means "
           + ", ".join(f"{r['cell']}={r['mean_dev_acc']:.3f}" for r in rows))


# 9 -----------------------------------------------------------------------------------

ADAPT_TRAIN = TrainConfig(epochs=200 * 16 / 4000, batch_size=16)


def test_09_adaptive(task, teacher_run):
    teacher = teacher_run[0]
    ids, mask, y = task.dev.batch(slice(0, 64))
    rewired = rewire(teacher, estimate_importance(teacher, task.dev))
    drift = float(np.abs(rewired.forward(ids, mask).logits - teacher.forward(ids, mask).logits).max())
    # nesting: every smaller sub-network reads a subset of a larger one's weights
    nested = True
    specs = [SubnetSpec(w, d) for w in (0.25, 0.5, 0.75, 1.0) for d in (0.25, 0.5, 0.75, 1.0)]
    used = {s: subnet_parameter_indices(TEACHER, s) for s in specs}
    for a in specs:
        for b in specs:
            if a.width <= b.width and set(a.layers(TEACHER)) <= set(b.layers(TEACHER)):
                nested &= all(used[a][k] <= used[b][k] for k in used[a])
    # accumulation
    ts = teacher.forward(ids[:8], mask[:8])
    widths = [SubnetSpec(1.0), SubnetSpec(0.5)]
    total, _ = accumulate(rewired, [(s, ts) for s in widths], ids[:8], mask[:8], y[:8], CKD_CONFIG)
    per = [subnet_loss(rewired, s, ts, ids[:8], mask[:8], y[:8], CKD_CONFIG)[1] for s in widths]
    acc_err = max(float(np.abs(total[k] - per[0][k] - per[1][k]).max()) for k in total)
    # phase 2
    steps = ADAPT_TRAIN.total_steps(len(task.train))
    _, rec = train_adaptive_width(teacher, rewired, [1.0, 0.5], task, CKD_CONFIG, ADAPT_TRAIN, seed=0)
    before, after = rec.metrics["probe_loss_start"], rec.metrics["probe_loss_end"]
    fell = all(a < b for a, b in zip(after, before))
    ok = drift <= 1e-9 and nested and acc_err <= 1e-10 and fell and steps <= 200
    record(9, ok, f"rewire logit drift {drift:.1e}; nesting {nested}; accumulation err {acc_err:.1e}; "
                  f"phase-2 loss {['%.4f->%.4f' % (b, a) for b, a in zip(before, after)]} in {steps} steps")


# 10 ----------------------------------------------------------------------------------

def test_10_reproducibility(task, teacher_run):
    teacher, trec = teacher_run
    recs = getattr(test_07_distillation_outcome, "records", None)
    drec = recs[1] if recs else distill(teacher, STUDENT, "ckd", CKD_CONFIG, task, replace(STUDENT_TRAIN, epochs=0.3),
                                        0)[1]
    t_again = rerun(trec)
    d_again = rerun(drec, teacher)
    ok = t_again.metrics == trec.metrics and d_again.metrics == drec.metrics
    record(10, ok, f"teacher rerun {t_again.metrics == trec.metrics}, CKD student rerun "
                   f"{d_again.metrics == drec.metrics} ({drec.metrics})")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
