"""Command-line entry point: ``ckd <subcommand> [--config FILE] [--key value ...]``.

Settings come from a flat YAML key-value file; every key can be overridden
by a flag of the same name (``--lambda_ckd 10``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .adaptive import (DEFAULT_DEPTHS, DEFAULT_WIDTHS, estimate_importance, evaluate_grid, rewire,
                       train_adaptive_full, train_adaptive_width)
from .baselines import OBJECTIVES, ConstraintViolation, compatibility_matrix
from .bench import BENCH_SCHEMA, bench_relations
from .checkpoint import load_model, save_model
from .harness import TrainConfig, ablation_suite, accuracy, distill, train_teacher, window_sweep, write_csv
from .losses import DistillConfig
from .model import ModelConfig
from .tasks import TaskSpec, generate_task

DEFAULTS = {
    # task
    "task": "local-pattern", "vocab_size": 24, "seq_len": 24, "num_classes": 4,
    "n_train": 4000, "n_dev": 1000, "n_test": 1000, "data_seed": 0,
    # architectures
    "teacher_layers": 4, "teacher_hidden": 64, "teacher_heads": 4, "teacher_ffn": 256,
    "student_layers": 2, "student_hidden": 32, "student_heads": 2, "student_ffn": 128,
    # optimisation
    "epochs": 3.0, "batch_size": 32, "lr": 1e-3, "warmup": 0.1, "beta1": 0.0,
    # distillation
    "objective": "ckd", "alpha": 0.9, "temperature": 4.0, "lambda_ckd": 100.0, "lambda_wr": 10.0,
    "lambda_ltr": 10.0, "delta": 16, "match_kind": "huber", "pair_kind": "l2", "pair_window": True,
    # experiments
    "seed": None, "seeds": "0,1,2,3", "deltas": "1,2,4,8,16,24", "widths": ",".join(map(str, DEFAULT_WIDTHS)),
    "depths": ",".join(map(str, DEFAULT_DEPTHS)), "out": "runs/latest", "teacher": None, "model": None,
    "students": "6/64/4,4/64/4,4/32/2,2/32/2", "losses": "all",
    "bench_n": "16,32,64,128", "bench_delta": "1,2,4,8,16", "bench_d": 16,
}
TRAINING = {"train-teacher", "distill", "ablate", "window-sweep", "adaptive"}
COMMANDS = ("train-teacher", "distill", "eval", "ablate", "window-sweep", "adaptive", "check-compat", "gradcheck",
            "bench-relations")


def _bool(s):
    if isinstance(s, bool):
        return s
    return str(s).strip().lower() in ("1", "true", "yes", "on")


def _ints(s):
    return [int(x) for x in str(s).split(",") if x.strip()]


def _floats(s):
    return [float(x) for x in str(s).split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ckd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML key-value file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, val in DEFAULTS.items():
            typ = _bool if isinstance(val, bool) else (type(val) if val is not None else str)
            if key == "seed":
                typ = int
            p.add_argument(f"--{key}", type=typ, default=None)
    return ap


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.command in TRAINING and cfg["seed"] is None:
        raise SystemExit(f"{args.command}: --seed is required")
    return cfg


def task_spec(c) -> TaskSpec:
    return TaskSpec(c["task"], int(c["vocab_size"]), int(c["seq_len"]), int(c["num_classes"]), int(c["n_train"]),
                    int(c["n_dev"]), int(c["n_test"]), int(c["data_seed"]))


def model_config(c, role: str, spec: TaskSpec) -> ModelConfig:
    return ModelConfig(num_layers=int(c[f"{role}_layers"]), hidden_dim=int(c[f"{role}_hidden"]),
                       num_heads=int(c[f"{role}_heads"]), ffn_dim=int(c[f"{role}_ffn"]),
                       vocab_size=spec.vocab_size, max_seq_len=spec.seq_len, num_classes=spec.num_classes,
                       pooling="token" if spec.token_level else "cls")


def train_config(c) -> TrainConfig:
    return TrainConfig(epochs=float(c["epochs"]), batch_size=int(c["batch_size"]), lr=float(c["lr"]),
                       warmup=float(c["warmup"]), beta1=float(c["beta1"]))


def distill_config(c) -> DistillConfig:
    delta = c["delta"]
    return DistillConfig(lambda_wr=float(c["lambda_wr"]), lambda_ltr=float(c["lambda_ltr"]),
                         lambda_ckd=float(c["lambda_ckd"]), alpha=float(c["alpha"]),
                         temperature=float(c["temperature"]), delta=None if delta in (None, "none") else int(delta),
                         match_kind=c["match_kind"], pair_kind=c["pair_kind"], pair_window=_bool(c["pair_window"]))


def _teacher(c):
    if not c["teacher"]:
        raise SystemExit("--teacher CHECKPOINT is required")
    return load_model(c["teacher"])


def _parse_arch(s: str, spec: TaskSpec, ffn_mult: int = 4) -> ModelConfig:
    parts = [int(x) for x in s.split("/")]
    layers, hidden = parts[0], parts[1]
    heads = parts[2] if len(parts) > 2 else max(1, hidden // 64)
    return ModelConfig(num_layers=layers, hidden_dim=hidden, num_heads=heads, ffn_dim=ffn_mult * hidden,
                       vocab_size=spec.vocab_size, max_seq_len=spec.seq_len, num_classes=spec.num_classes)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    c = resolve(args)
    out = Path(c["out"])
    cmd = args.command
    if cmd in TRAINING:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(yaml.safe_dump(c, sort_keys=True))

    if cmd == "check-compat":
        spec = task_spec(c)
        teacher = model_config(c, "teacher", spec)
        students = [_parse_arch(s, spec) for s in c["students"].split(",")]
        rows = compatibility_matrix(teacher, students)
        print(f"teacher {teacher.short()} ({teacher.num_heads} heads)")
        print("student".ljust(10) + "".join(o.ljust(16) for o in OBJECTIVES))
        for r in rows:
            print(r["student"].ljust(10) + "".join(str(r[o]).ljust(16) for o in OBJECTIVES))
        return 0

    if cmd == "bench-relations":
        rows = bench_relations(_ints(c["bench_n"]), _ints(c["bench_delta"]), int(c["bench_d"]))
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "bench_relations.csv", rows, BENCH_SCHEMA)
        for r in rows:
            print(",".join(str(r[k]) for k in r))
        return 0

    if cmd == "gradcheck":
        from .verify import gradcheck_suite

        names = None if c["losses"] == "all" else c["losses"].split(",")
        worst = 0.0
        for name, rep in gradcheck_suite(names):
            print(f"{name:16s} {rep}")
            worst = max(worst, rep.max_rel_error)
        return 0 if worst < 1e-4 else 1

    spec = task_spec(c)
    data = generate_task(spec)
    seed = c["seed"]

    if cmd == "train-teacher":
        _, rec = train_teacher(data, model_config(c, "teacher", spec), train_config(c), seed, out)
        print(json.dumps(rec.metrics))
        return 0

    if cmd == "distill":
        teacher = _teacher(c)
        try:
            _, rec = distill(teacher, model_config(c, "student", spec), c["objective"], distill_config(c), data,
                             train_config(c), seed, out)
        except ConstraintViolation as e:
            print(f"refused: {e}", file=sys.stderr)
            return 2
        print(json.dumps(rec.metrics))
        return 0

    if cmd == "eval":
        if not c["model"]:
            raise SystemExit("--model CHECKPOINT is required")
        model = load_model(c["model"])
        if c["widths"] != DEFAULTS["widths"] or c["depths"] != DEFAULTS["depths"] or args.widths or args.depths:
            rows = evaluate_grid(model, _floats(c["widths"]), _floats(c["depths"]), data.dev)
            out.mkdir(parents=True, exist_ok=True)
            write_csv(out / "eval_grid.csv", rows, "ckd.eval-grid/1")
            for r in rows:
                print(f"{r['width']},{r['depth']},{r['dev_acc']}")
        else:
            print(json.dumps({"dev_acc": accuracy(model, data.dev), "test_acc": accuracy(model, data.test)}))
        return 0

    if cmd == "ablate":
        rows = ablation_suite(_teacher(c), model_config(c, "student", spec), data, distill_config(c),
                              train_config(c), _ints(c["seeds"]), out)
        write_csv(out / "ablation.csv", rows, "ckd.ablation/1")
        for r in rows:
            print(f"{r['cell']:8s} {r['mean_dev_acc']:.4f} {r['dev_acc']}")
        return 0

    if cmd == "window-sweep":
        rows = window_sweep(_teacher(c), model_config(c, "student", spec), data, distill_config(c),
                            train_config(c), _ints(c["deltas"]), _ints(c["seeds"]), out)
        write_csv(out / "window_sweep.csv", rows, "ckd.window-sweep/1")
        for r in rows:
            print(f"{r['delta']},{r['mean_dev_acc']:.4f}")
        return 0

    if cmd == "adaptive":
        teacher = _teacher(c)
        widths, depths = _floats(c["widths"]), _floats(c["depths"])
        dcfg, tcfg = distill_config(c), train_config(c)
        rewired = rewire(teacher, estimate_importance(teacher, data.dev))
        save_model(out / "rewired.ckpt", rewired, {"phase": 1})
        dyn_w, rec_w = train_adaptive_width(teacher, rewired, widths, data, dcfg, tcfg, seed)
        save_model(out / "adaptive_width.ckpt", dyn_w, {"phase": 2, "widths": widths})
        rec_w.save(out / "record_width.json")
        dyn, rec = train_adaptive_full(dyn_w, dyn_w, widths, depths, data, dcfg, tcfg, seed)
        save_model(out / "adaptive.ckpt", dyn, {"phase": 3, "widths": widths, "depths": depths})
        rec.save(out / "record_full.json")
        rows = evaluate_grid(dyn, widths, depths, data.dev)
        write_csv(out / "adaptive_grid.csv", rows, "ckd.eval-grid/1")
        for r in rows:
            print(f"{r['width']},{r['depth']},{r['dev_acc']}")
        return 0

    raise SystemExit(f"unknown command {cmd}")


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
