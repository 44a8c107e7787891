"""Command-line entry point: ``s2kd {gen,train-teacher,train-student,eval,ablate,gradcheck}``.

Exit status is 0 on success, 1 on a failed check or a rejected file, and 2
on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import distill, gradcheck
from . import tensor as T
from .config import ExperimentConfig
from .data import Dataset, generate
from .errors import ConfigurationError, S2KDError
from .formats import load_checkpoint, save_checkpoint
from .metrics import MetricsRow
from .models import StudentModel, TeacherModel, build_student, build_teacher

log = logging.getLogger("s2kd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

ABLATION_FIELDS = ("mode", "pred", "spectral", "semantic", "params", "mse", "mae", "ssim")
_MODE_FLAGS = {
    "baseline": (1, 0, 0),
    "spectral": (1, 1, 0),
    "semantic": (1, 0, 1),
    "full": (1, 1, 1),
}


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "float64", False):
        cfg.train.float_width = 64
    return cfg


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_report(out: Path, stem: str, report: distill.TrainReport) -> None:
    fields = distill.EpochRecord.CSV_FIELDS
    write_csv(out / f"{stem}_log.csv", fields, ([getattr(e, f) for f in fields] for e in report.epochs))
    # wall-clock goes to a sidecar so the main log stays byte-deterministic
    write_csv(out / f"{stem}_timing.csv", ("epoch", "seconds"),
              ((e.epoch, round(e.seconds, 3)) for e in report.epochs))


def write_metrics(path, rows) -> None:
    write_csv(path, MetricsRow.FIELDS, ([getattr(r, f) for f in MetricsRow.FIELDS] for r in rows))


def save_model(path, prefix: str, model) -> None:
    save_checkpoint(path, {f"{prefix}.{k}": v for k, v in model.state_dict().items()})


def load_teacher(path, cfg: ExperimentConfig, data_cfg) -> TeacherModel:
    entries = load_checkpoint(path)
    state = _strip(entries, "teacher", path)
    T.set_float_width(cfg.train.float_width)
    teacher = build_teacher(data_cfg, cfg.model, np.random.default_rng(0))
    teacher.load_state_dict(state)
    teacher.freeze()
    return teacher


def load_student(entries, path, cfg: ExperimentConfig, data_cfg) -> StudentModel:
    state = _strip(entries, "student", path)
    T.set_float_width(cfg.train.float_width)
    student = build_student(data_cfg, cfg.model, np.random.default_rng(0))
    student.load_state_dict(state)
    return student


def _strip(entries, prefix, path):
    if not entries or not all(k.startswith(prefix + ".") for k in entries):
        raise ConfigurationError(f"{path} is not a {prefix} checkpoint")
    return {k[len(prefix) + 1:]: v for k, v in entries.items()}


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or cfg.paths.data)
    manifest = generate(cfg.data, cfg.train.seed, out)
    c = manifest.counts
    print(f"wrote {out}: train={c['train']} val={c['val']} test={c['test']} "
          f"frames={cfg.data.frames} size={cfg.data.height}x{cfg.data.width}x{cfg.data.channels} "
          f"seed={cfg.train.seed}")
    return EXIT_OK


def _dataset(args, cfg) -> Dataset:
    ds = Dataset.load(args.data or cfg.paths.data)
    d = ds.config
    want = cfg.data
    for key in ("t_in", "t_out", "height", "width", "channels", "e_max"):
        if getattr(d, key) != getattr(want, key):
            raise ConfigurationError(f"dataset {key}={getattr(d, key)} disagrees with config {getattr(want, key)}")
    return ds


def cmd_train_teacher(args) -> int:
    cfg = load_config(args)
    ds = _dataset(args, cfg)
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    privileged = not args.vision_only
    stem = "teacher" if privileged else "teacher_vision_only"
    teacher, report = distill.train_teacher(ds, cfg, privileged=privileged)
    save_model(out / f"{stem}.s2kc", "teacher", teacher)
    write_report(out, stem, report)
    row = distill.evaluate_teacher(teacher, ds["test"], stem, "privileged" if privileged else "vision-only",
                                   cfg.train.eval_batch_size)
    write_metrics(out / f"{stem}_metrics.csv", [row])
    print(f"{stem}: epochs={len(report.epochs)} test mse={row.mse:.6f} mae={row.mae:.6f} ssim={row.ssim:.4f}")
    return EXIT_OK


def _train_one_student(ds, teacher, cfg, mode, out: Path):
    student, report = distill.train_student(ds, teacher, cfg, mode=mode)
    stem = f"student_{mode}"
    save_model(out / f"{stem}.s2kc", "student", student)
    write_report(out, stem, report)
    row = distill.evaluate_student(student, ds["test"], f"student-{cfg.model.student_variant}", mode,
                                   cfg.train.eval_batch_size)
    write_metrics(out / f"{stem}_metrics.csv", [row])
    return row, report


def cmd_train_student(args) -> int:
    cfg = load_config(args)
    mode = distill.normalize_mode(args.mode)
    ds = _dataset(args, cfg)
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    needs_teacher = distill.distill_config(cfg, mode).active
    teacher = None
    if needs_teacher:
        if not args.teacher:
            raise ConfigurationError(f"mode {mode!r} needs --teacher")
        teacher = load_teacher(args.teacher, cfg, ds.config)
    row, report = _train_one_student(ds, teacher, cfg, mode, out)
    print(f"student_{mode}: epochs={len(report.epochs)} test mse={row.mse:.6f} mae={row.mae:.6f} "
          f"ssim={row.ssim:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    ds = _dataset(args, cfg)
    path = args.checkpoint
    entries = load_checkpoint(path)
    name = Path(path).stem
    if next(iter(entries), "").startswith("teacher."):
        model = load_teacher(path, cfg, ds.config)
        row = distill.evaluate_teacher(model, ds["test"], name, "teacher", cfg.train.eval_batch_size)
    else:
        model = load_student(entries, path, cfg, ds.config)
        row = distill.evaluate_student(model, ds["test"], name, args.mode or "student",
                                       cfg.train.eval_batch_size)
    out = Path(args.out) if args.out else Path(path).with_name(f"{name}_eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, [row])
    print(f"{name}: test mse={row.mse:.6f} mae={row.mae:.6f} ssim={row.ssim:.4f}")
    return EXIT_OK


def run_ablation(ds, teacher, cfg, out: Path) -> list:
    rows = []
    for mode in distill.MODES:
        start = time.perf_counter()
        row, report = _train_one_student(ds, teacher, cfg, mode, out)
        log.info("%s: mse %.6f (%d epochs, %.0fs)", mode, row.mse, len(report.epochs),
                 time.perf_counter() - start)
        rows.append((mode, *_MODE_FLAGS[mode], row.params, row.mse, row.mae, row.ssim))
    write_csv(out / "ablation.csv", ABLATION_FIELDS, rows)
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    ds = _dataset(args, cfg)
    if not args.teacher:
        raise ConfigurationError("ablate needs --teacher")
    teacher = load_teacher(args.teacher, cfg, ds.config)
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(ds, teacher, cfg, out)
    for r in rows:
        print(f"{r[0]:>9}: mse={r[5]:.6f} mae={r[6]:.6f} ssim={r[7]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = gradcheck.run(args.op, args.tol)
    except KeyError:
        print(f"unknown op {args.op!r}; registered: {', '.join(gradcheck.REGISTERED)}", file=sys.stderr)
        return EXIT_USAGE
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.op:<15} {r.max_rel_err:.3e} <= {r.tol:.0e}  {r.label}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2kd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key = value config file (defaults built in)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--float64", action="store_true", help="run in 64-bit float mode")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory")

    p = sub.add_parser("gen", help="generate the synthetic benchmark")
    common(p, data=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-teacher", help="stage 1: train and freeze the privileged teacher")
    common(p)
    p.add_argument("--vision-only", action="store_true",
                   help="pin every alignment value projection at zero (no privileged channel)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="stage 2: distil into the vision-only student")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--mode", default="full", choices=distill.MODES + tuple(distill._MODE_ALIASES))
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--teacher", help=argparse.SUPPRESS)
    p.add_argument("--mode", help="method label for the metrics row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train all four distillation modes with identical seeds")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--op", help="run only the checks for this op")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--float64", action="store_true", help="accepted for symmetry; checks always run in 64-bit")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (S2KDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
