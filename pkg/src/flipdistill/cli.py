"""Command-line entry point: gen, train, eval, gradcheck, sweep-margin, ablate.

Config resolution order per value: explicit flag > config-file section
([data]/[model]/[train], INI syntax) > built-in default. The single
--seed flag feeds both the data and training seeds, with the
FLIPDISTILL_SEED environment variable as a fallback. Every run echoes
its fully resolved config into the run directory.
"""

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import models, trainer
from .data import (SyntheticCorpusConfig, generate_synthetic_corpus,
                   load_dataset, save_dataset)
from .losses import ConfigError, TrainingStepError
from .models import ModelConfig, StudentTransformer, TeacherEncoder, config_hash
from .trainer import TrainConfig, select_and_average_checkpoints

log = logging.getLogger(__name__)

# fields owned globally or derived from other sections, not exposed per-section
_SKIP = {
    "data": {"seed"},
    "model": {"vocab_size", "max_len"},
    "train": {"seed", "disable_sup"},
}
_SECTIONS = {
    "data": SyntheticCorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}


def _add_section_args(parser, section):
    cls = _SECTIONS[section]
    group = parser.add_argument_group(section)
    for f in dataclasses.fields(cls):
        if f.name in _SKIP[section]:
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(flag, action=argparse.BooleanOptionalAction,
                               default=None, help=f"[{section}] default: {f.default}")
        elif isinstance(f.default, tuple):
            group.add_argument(flag, type=str, default=None,
                               help=f"[{section}] comma-separated, default: "
                                    f"{','.join(str(x) for x in f.default)}")
        else:
            group.add_argument(flag, type=type(f.default), default=None,
                               help=f"[{section}] default: {f.default}")


def _coerce(raw, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(float(x) for x in str(raw).split(","))
    return type(default)(raw)


def _resolve_seed(args, file_cfg):
    if getattr(args, "seed", None) is not None:
        return args.seed
    for section in ("train", "data"):
        if file_cfg.has_option(section, "seed"):
            return int(file_cfg.get(section, "seed"))
    env = os.environ.get("FLIPDISTILL_SEED")
    if env is not None:
        return int(env)
    return 0


def resolve_configs(args):
    """Merge flags, config file, and defaults into the three config objects."""
    file_cfg = configparser.ConfigParser()
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        file_cfg.read(args.config)

    built = {}
    for section, cls in _SECTIONS.items():
        kwargs = {}
        for f in dataclasses.fields(cls):
            flag_val = getattr(args, f.name, None) if f.name not in _SKIP[section] else None
            if flag_val is not None:
                kwargs[f.name] = (_coerce(flag_val, f.default)
                                  if isinstance(f.default, tuple) else flag_val)
            elif file_cfg.has_option(section, f.name):
                kwargs[f.name] = _coerce(file_cfg.get(section, f.name), f.default)
        built[section] = cls(**kwargs)

    seed = _resolve_seed(args, file_cfg)
    data_cfg, model_cfg, train_cfg = built["data"], built["model"], built["train"]
    data_cfg.seed = seed
    train_cfg.seed = seed
    # the model vocabulary and context window follow the corpus unless pinned in the file
    if not file_cfg.has_option("model", "vocab_size"):
        model_cfg.vocab_size = data_cfg.vocab_size
    else:
        model_cfg.vocab_size = int(file_cfg.get("model", "vocab_size"))
    if not file_cfg.has_option("model", "max_len"):
        model_cfg.max_len = 2 * data_cfg.max_len + 3
    else:
        model_cfg.max_len = int(file_cfg.get("model", "max_len"))
    return data_cfg, model_cfg, train_cfg


def _resolved_dict(data_cfg, model_cfg, train_cfg):
    return {
        "data": dataclasses.asdict(data_cfg),
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "model_config_hash": config_hash(model_cfg),
    }


def _write_resolved(run_dir, data_cfg, model_cfg, train_cfg):
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.resolved"), "w", encoding="utf-8") as f:
        json.dump(_resolved_dict(data_cfg, model_cfg, train_cfg), f,
                  indent=2, sort_keys=True)
        f.write("\n")


def _load_or_generate(args, data_cfg):
    data_dir = getattr(args, "data_dir", None)
    if data_dir:
        return tuple(load_dataset(os.path.join(data_dir, f"{s}.jsonl"))
                     for s in ("train", "dev", "test"))
    return generate_synthetic_corpus(data_cfg)


def _build_models(model_cfg, train_cfg, train_examples, need_teacher=True):
    teacher = None
    if need_teacher:
        teacher = TeacherEncoder(model_cfg, np.random.default_rng(train_cfg.seed + 1))
        if train_cfg.teacher_prefit_epochs > 0:
            trainer.prefit_teacher(teacher, train_examples, train_cfg)
        else:
            teacher.freeze()
    student = StudentTransformer(model_cfg, np.random.default_rng(train_cfg.seed + 2))
    return teacher, student


# -- commands ------------------------------------------------------------

def cmd_gen(args):
    data_cfg, _, _ = resolve_configs(args)
    os.makedirs(args.out, exist_ok=True)
    splits = generate_synthetic_corpus(data_cfg)
    counts = {}
    for name, examples in zip(("train", "dev", "test"), splits):
        save_dataset(examples, os.path.join(args.out, f"{name}.jsonl"))
        counts[name] = len(examples)
    manifest = {
        "config": dataclasses.asdict(data_cfg),
        "config_hash": config_hash(data_cfg),
        "counts": counts,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {sum(counts.values())} examples to {args.out} "
          f"(train={counts['train']} dev={counts['dev']} test={counts['test']})")
    return 0


def _run_training(args, data_cfg, model_cfg, train_cfg, run_dir):
    splits = _load_or_generate(args, data_cfg)
    train_ex, dev_ex, test_ex = splits
    need_teacher = not (train_cfg.disable_dist and train_cfg.disable_mcl) \
        and not (train_cfg.w_dist == 0 and train_cfg.w_mcl == 0)
    teacher, student = _build_models(model_cfg, train_cfg, train_ex, need_teacher)
    if not need_teacher:
        train_cfg.disable_dist = True
        train_cfg.disable_mcl = True
    _write_resolved(run_dir, data_cfg, model_cfg, train_cfg)
    result = trainer.train(student, teacher, train_ex, dev_ex, test_ex,
                           train_cfg, model_cfg, run_dir=run_dir)
    hist = trainer.export_score_histogram(student, test_ex)
    trainer.write_histogram_csv(hist, os.path.join(run_dir, "histogram.csv"))
    report = select_and_average_checkpoints(result.checkpoints, k=args.k_best)
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump({
            "accuracy": report.accuracy, "f1": report.f1, "auc": report.auc,
            "k": args.k_best, "separation": hist.separation,
            "config_hash": config_hash(model_cfg),
        }, f, indent=2, sort_keys=True)
        f.write("\n")
    return result, report, hist


def cmd_train(args):
    data_cfg, model_cfg, train_cfg = resolve_configs(args)
    try:
        result, report, hist = _run_training(args, data_cfg, model_cfg, train_cfg,
                                             args.run_dir)
    except TrainingStepError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3
    print(f"top-{args.k_best} averaged test metrics: acc={report.accuracy:.4f} "
          f"f1={report.f1:.4f} auc={report.auc if report.auc is None else round(report.auc, 4)}")
    print(f"score separation (pos mean - neg mean): {hist.separation:.4f}")
    print(f"run directory: {args.run_dir}")
    return 0


def cmd_eval(args):
    _, model_cfg, train_cfg = resolve_configs(args)
    examples = load_dataset(args.dataset)
    student = StudentTransformer(model_cfg, np.random.default_rng(train_cfg.seed + 2))
    models.load_checkpoint(args.checkpoint, student, model_cfg)
    report = trainer.evaluate(student, examples, split="eval")
    out = {
        "accuracy": report.accuracy, "f1": report.f1, "auc": report.auc,
        "n_examples": len(examples), "checkpoint": args.checkpoint,
        "config_hash": config_hash(model_cfg),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(out, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


_GRADCHECK_FLAGS = {
    "all": {},
    "sup": {"disable_dist": True, "disable_mcl": True},
    "dist": {"disable_mcl": True, "disable_sup": True},
    "mcl": {"disable_dist": True, "disable_sup": True},
}


def cmd_gradcheck(args):
    data_cfg, model_cfg, train_cfg = resolve_configs(args)
    for name, value in _GRADCHECK_FLAGS[args.loss].items():
        setattr(train_cfg, name, value)
    data_cfg.n_examples = min(data_cfg.n_examples, 120)
    train_ex, _, _ = generate_synthetic_corpus(data_cfg)
    need_teacher = not (train_cfg.disable_dist and train_cfg.disable_mcl)
    teacher, student = _build_models(model_cfg, train_cfg, train_ex, need_teacher)
    batch = trainer.make_batches(train_ex, args.batch, seed=train_cfg.seed)[0]
    err = trainer.grad_check(student, teacher, batch, train_cfg,
                             h=args.h, n_coords=args.n_coords, seed=train_cfg.seed)
    ok = err <= args.tol
    print(f"gradcheck loss={args.loss} max_rel_err={err:.3e} "
          f"tol={args.tol:.1e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _parse_float_list(text):
    return [float(x) for x in text.split(",") if x.strip() != ""]


def cmd_sweep_margin(args):
    data_cfg, model_cfg, train_cfg = resolve_configs(args)
    values = _parse_float_list(args.m_c_list)
    os.makedirs(args.run_dir, exist_ok=True)
    rows = []
    for m_c in values:
        point_cfg = dataclasses.replace(train_cfg, m_c=m_c)
        point_dir = os.path.join(args.run_dir, f"mc_{m_c:g}")
        try:
            result, report, _ = _run_training(args, data_cfg, model_cfg, point_cfg,
                                              point_dir)
            dev_f1 = max(r.dev.f1 for r in result.checkpoints)
            rows.append((m_c, f"{dev_f1:.6f}", f"{report.f1:.6f}"))
        except Exception as e:  # noqa: BLE001 - keep sweeping past a failed point
            log.error("sweep point m_c=%g failed: %s", m_c, e)
            rows.append((m_c, "", ""))
    out_path = os.path.join(args.run_dir, "sweep.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["m_c", "dev_f1", "test_f1"])
        for row in rows:
            w.writerow(row)
    print(f"wrote {out_path}")
    return 0


_ABLATIONS = [
    ("full", {}),
    ("no-mcl", {"disable_mcl": True}),
    ("no-dist", {"disable_dist": True}),
    ("no-filter", {"disable_filter": True}),
]


def cmd_ablate(args):
    data_cfg, model_cfg, train_cfg = resolve_configs(args)
    os.makedirs(args.run_dir, exist_ok=True)
    rows = []
    for name, overrides in _ABLATIONS:
        run_cfg = dataclasses.replace(train_cfg, **overrides)
        run_dir = os.path.join(args.run_dir, name)
        try:
            _, report, hist = _run_training(args, data_cfg, model_cfg, run_cfg, run_dir)
            rows.append((name, f"{report.accuracy:.6f}", f"{report.f1:.6f}",
                         "" if report.auc is None else f"{report.auc:.6f}",
                         f"{hist.separation:.6f}"))
        except TrainingStepError as e:
            log.error("ablation run %s failed: %s", name, e)
            rows.append((name, "", "", "", ""))
    out_path = os.path.join(args.run_dir, "ablation.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["run", "acc", "f1", "auc", "separation"])
        for row in rows:
            w.writerow(row)
    for row in rows:
        print("  ".join(str(x) for x in row))
    print(f"wrote {out_path}")
    return 0


# -- parser --------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="flipdistill",
        description="Flipped knowledge distillation for text matching at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sections):
        p.add_argument("--config", help="INI config file with [data]/[model]/[train] sections")
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (fallback: FLIPDISTILL_SEED env, then 0)")
        for s in sections:
            _add_section_args(p, s)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p, ["data"])
    p.add_argument("--out", default="data", help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the student with flipped distillation")
    common(p, ["data", "model", "train"])
    p.add_argument("--data-dir", default=None, help="directory with train/dev/test.jsonl")
    p.add_argument("--run-dir", default="runs/run", help="output run directory")
    p.add_argument("--k-best", type=int, default=5, help="checkpoints averaged for the report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    common(p, ["model", "train"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="also save the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tape gradients")
    common(p, ["data", "model", "train"])
    p.add_argument("--loss", choices=sorted(_GRADCHECK_FLAGS), default="all")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--n-coords", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-margin", help="train once per margin value, emit the F1 curve")
    common(p, ["data", "model", "train"])
    p.add_argument("--m-c-list", default="0.0,0.02,0.04,0.06,0.08,0.1",
                   help="comma-separated margin values")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--run-dir", default="runs/sweep")
    p.add_argument("--k-best", type=int, default=5)
    p.set_defaults(func=cmd_sweep_margin)

    p = sub.add_parser("ablate", help="full vs w/o MCL vs w/o dist vs w/o filter")
    common(p, ["data", "model", "train"])
    p.add_argument("--data-dir", default=None)
    p.add_argument("--run-dir", default="runs/ablate")
    p.add_argument("--k-best", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, models.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
