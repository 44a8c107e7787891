"""Distillation losses and the two-stage training procedure.

Stage 1 fits the privileged teacher on the prediction loss alone and freezes
it. Stage 2 fits the student on ``pred + lam * (semantic + beta * spectral)``
where the teacher only runs forward (under ``no_grad``) to supply the fused
latent target.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .config import ExperimentConfig
from .data import Dataset, SplitData, descriptor_width
from .errors import ConfigurationError, ContractError, DimensionError, InputError
from .models import StudentModel, TeacherModel, build_student, build_teacher
from .nn import Adam, PlateauSchedule
from .spectral import spectral_loss

log = logging.getLogger(__name__)

MODES = ("baseline", "spectral", "semantic", "full")
_MODE_ALIASES = {"spectral-only": "spectral", "semantic-only": "semantic"}

# independent random streams, keyed by purpose
TEACHER_INIT, TEACHER_BATCHES, STUDENT_INIT, STUDENT_BATCHES = 1, 2, 3, 4


def purpose_rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose])


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigurationError(f"unknown distillation mode {mode!r}; choose from {', '.join(MODES)}")
    return mode


@dataclass
class DistillConfig:
    lam: float = 1.0
    beta: float = 0.5
    mode: str = "full"
    spectral_axis: int = -2

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.lam < 0 or self.beta < 0:
            raise ConfigurationError(f"lambda and beta must be >= 0, got {self.lam}, {self.beta}")

    @property
    def use_semantic(self) -> bool:
        return self.mode in ("semantic", "full")

    @property
    def use_spectral(self) -> bool:
        return self.mode in ("spectral", "full")

    @property
    def active(self) -> bool:
        """True when the distillation term can move the student at all."""
        return self.mode != "baseline" and self.lam > 0


# ---------------------------------------------------------------- losses


def pred_loss(prediction, truth) -> T.Tensor:
    prediction, truth = T.as_tensor(prediction), T.as_tensor(truth)
    if prediction.shape != truth.shape:
        raise DimensionError(f"prediction {prediction.shape} and truth {truth.shape} differ")
    return T.mean(T.square(T.sub(prediction, truth)))


def semantic_loss(z_proj, z_fused) -> T.Tensor:
    z_proj, z_fused = T.as_tensor(z_proj), T.as_tensor(z_fused)
    if z_proj.shape != z_fused.shape:
        raise DimensionError(f"projected student latent {z_proj.shape} vs teacher latent {z_fused.shape}")
    if z_fused.requires_grad:
        raise ContractError("teacher latent carries gradients; the teacher must be frozen")
    return T.mean(T.square(T.sub(z_proj, z_fused)))


def distill_terms(z_proj, z_fused, cfg: DistillConfig) -> dict:
    terms = {}
    if cfg.use_semantic:
        terms["semantic"] = semantic_loss(z_proj, z_fused)
    if cfg.use_spectral:
        if T.as_tensor(z_fused).requires_grad:
            raise ContractError("teacher latent carries gradients; the teacher must be frozen")
        terms["spectral"] = spectral_loss(z_proj, z_fused, axis=cfg.spectral_axis)
    return terms


def combine_distill(terms: dict, cfg: DistillConfig) -> T.Tensor:
    if cfg.mode == "full":
        return T.add(terms["semantic"], T.scale(terms["spectral"], cfg.beta))
    if cfg.mode == "semantic":
        return terms["semantic"]
    if cfg.mode == "spectral":
        return terms["spectral"]
    return T.Tensor(0.0)


def distill_loss(z_proj, z_fused, cfg: DistillConfig) -> T.Tensor:
    z_proj, z_fused = T.as_tensor(z_proj), T.as_tensor(z_fused)
    if z_proj.shape != z_fused.shape:
        raise DimensionError(f"projected student latent {z_proj.shape} vs teacher latent {z_fused.shape}")
    return combine_distill(distill_terms(z_proj, z_fused, cfg), cfg)


def student_objective(pred, y, z_proj, z_fused, cfg: DistillConfig):
    """Return ``(total, components)``; components hold plain floats for logging."""
    lp = pred_loss(pred, y)
    parts = {"pred": float(lp.data), "semantic": 0.0, "spectral": 0.0}
    if not cfg.active:
        return lp, parts
    terms = distill_terms(z_proj, z_fused, cfg)
    for key, value in terms.items():
        parts[key] = float(value.data)
    total = T.add(lp, T.scale(combine_distill(terms, cfg), cfg.lam))
    return total, parts


# ---------------------------------------------------------------- reports


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    pred: float
    semantic: float
    spectral: float
    seconds: float = field(default=0.0, compare=False)

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "pred", "semantic", "spectral")


@dataclass
class StepRecord:
    epoch: int
    step: int
    total: float
    pred: float
    semantic: float
    spectral: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    stopped_early: bool = False

    @property
    def learning_rates(self) -> list:
        return [e.lr for e in self.epochs]


# ---------------------------------------------------------------- helpers


def _require_descriptors(split: SplitData, width: int, name: str) -> None:
    if split.s is None or split.s.ndim != 2 or split.s.shape[1] != width:
        raise InputError(f"{name} split lacks privileged descriptors of width {width}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _eval_chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def _check_no_teacher_grads(teacher: TeacherModel | None) -> None:
    if teacher is None:
        return
    for name, p in teacher.named_parameters().items():
        if p.grad is not None:
            raise ContractError(f"teacher parameter {name!r} received a gradient during student training")


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.best_state = None
        self.bad = 0

    def update(self, epoch: int, val: float, model) -> bool:
        """Record ``val``; return True when training should stop."""
        if val < self.best:
            self.best, self.best_epoch, self.bad = val, epoch, 0
            self.best_state = model.state_dict()
            return False
        self.bad += 1
        return self.bad >= self.patience


def _fit(model, params, step_fn, val_fn, split: SplitData, cfg: ExperimentConfig, batch_rng,
         report: TrainReport, on_epoch=None, after_backward=None):
    tc = cfg.train
    opt = Adam(params, lr=tc.lr)
    schedule = PlateauSchedule(tc.lr, tc.plateau_factor, tc.plateau_patience)
    stopper = _EarlyStopper(tc.early_stop_patience)
    n = len(split)
    for epoch in range(1, tc.max_epochs + 1):
        start = time.perf_counter()
        totals = {"total": 0.0, "pred": 0.0, "semantic": 0.0, "spectral": 0.0}
        for step, idx in enumerate(_batches(n, tc.batch_size, batch_rng)):
            batch = split.batch(idx)
            with T.recording():
                total, parts = step_fn(batch)
                T.backward(total)
            if after_backward is not None:
                after_backward()
            record = StepRecord(epoch, step, float(total.data), parts["pred"],
                                parts["semantic"], parts["spectral"])
            report.steps.append(record)
            opt.step()
            opt.zero_grad()
            w = len(idx) / n
            totals["total"] += record.total * w
            for key in ("pred", "semantic", "spectral"):
                totals[key] += parts[key] * w
        val = val_fn()
        rec = EpochRecord(epoch, totals["total"], val, opt.lr, totals["pred"], totals["semantic"],
                          totals["spectral"], time.perf_counter() - start)
        report.epochs.append(rec)
        log.info("epoch %d train %.6f val %.6f lr %.1e (%.1fs)", epoch, rec.train_loss, val, opt.lr,
                 rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        stop = stopper.update(epoch, val, model)
        opt.lr = schedule.step(val)
        if stop:
            report.stopped_early = True
            break
    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    report.best_epoch, report.best_val = stopper.best_epoch, stopper.best


# ---------------------------------------------------------------- stage 1


def teacher_predict(teacher: TeacherModel, split: SplitData, chunk: int = 100) -> np.ndarray:
    outs = []
    with T.no_grad():
        for idx in _eval_chunks(len(split), chunk):
            pred, _ = teacher(split.x[idx], split.s[idx])
            outs.append(pred.data)
    return np.concatenate(outs)


def train_teacher(data: Dataset, cfg: ExperimentConfig, privileged: bool = True,
                  on_epoch=None) -> tuple:
    """Fit the teacher on the prediction loss, restore its best epoch, and freeze it."""
    T.set_float_width(cfg.train.float_width)
    width = descriptor_width(data.config.e_max)
    for name in ("train", "val"):
        _require_descriptors(data[name], width, name)
    teacher = build_teacher(data.config, cfg.model, purpose_rng(cfg.train.seed, TEACHER_INIT), privileged)
    train, val = data["train"], data["val"]

    def step_fn(batch):
        pred, _ = teacher(batch.x, batch.s)
        loss = pred_loss(pred, batch.y)
        return loss, {"pred": float(loss.data), "semantic": 0.0, "spectral": 0.0}

    def val_fn():
        return metrics.mse(teacher_predict(teacher, val, cfg.train.eval_batch_size), val.y)

    report = TrainReport()
    _fit(teacher, teacher.trainable(), step_fn, val_fn, train, cfg,
         purpose_rng(cfg.train.seed, TEACHER_BATCHES), report, on_epoch)
    teacher.freeze()
    return teacher, report


# ---------------------------------------------------------------- stage 2


def _spectral_axis(cfg: ExperimentConfig) -> int:
    return -2 if cfg.model.spectral_axis == "token" else -1


def distill_config(cfg: ExperimentConfig, mode: str) -> DistillConfig:
    return DistillConfig(cfg.train.lam, cfg.train.beta, mode, _spectral_axis(cfg))


def student_predict(student: StudentModel, split: SplitData, chunk: int = 100) -> np.ndarray:
    outs = []
    with T.no_grad():
        for idx in _eval_chunks(len(split), chunk):
            outs.append(student.predict(split.x[idx]).data)
    return np.concatenate(outs)


def student_split_loss(student: StudentModel, teacher, split: SplitData, dcfg: DistillConfig,
                       chunk: int = 100) -> float:
    """Average student objective over ``split`` (the validation signal)."""
    total = 0.0
    with T.no_grad():
        for idx in _eval_chunks(len(split), chunk):
            pred, z_proj = student(split.x[idx])
            z_fused = teacher(split.x[idx], split.s[idx])[1].z_fused if dcfg.active else None
            value, _ = student_objective(pred, split.y[idx], z_proj, z_fused, dcfg)
            total += float(value.data) * len(idx)
    return total / len(split)


def train_student(data: Dataset, teacher: TeacherModel | None, cfg: ExperimentConfig,
                  mode: str = "full", on_epoch=None) -> tuple:
    """Fit a vision-only student against ground truth plus the teacher's fused latent."""
    T.set_float_width(cfg.train.float_width)
    dcfg = distill_config(cfg, mode)
    if dcfg.active:
        if teacher is None:
            raise ContractError(f"mode {dcfg.mode!r} needs a trained teacher")
        if not teacher.frozen or any(p.requires_grad for p in teacher.parameters()):
            raise ContractError("teacher must be frozen before student training")
        width = descriptor_width(data.config.e_max)
        for name in ("train", "val"):
            _require_descriptors(data[name], width, name)
    else:
        teacher = None

    student = build_student(data.config, cfg.model, purpose_rng(cfg.train.seed, STUDENT_INIT))
    params = student.trainable()
    if not dcfg.active:
        # the projection only feeds the distillation term
        params = {k: p for k, p in params.items() if not k.startswith("projection.")}
    train, val = data["train"], data["val"]
    shape_checked = []

    def step_fn(batch):
        z_fused = None
        if teacher is not None:
            with T.no_grad():
                z_fused = teacher(batch.x, batch.s)[1].z_fused
        pred, z_proj = student(batch.x)
        if z_fused is not None and not shape_checked:
            if z_proj.shape != z_fused.shape:
                raise DimensionError(f"student projection {z_proj.shape} vs teacher latent {z_fused.shape}")
            shape_checked.append(True)
        return student_objective(pred, batch.y, z_proj, z_fused, dcfg)

    def val_fn():
        _check_no_teacher_grads(teacher)
        return student_split_loss(student, teacher, val, dcfg, cfg.train.eval_batch_size)

    report = TrainReport()
    _fit(student, params, step_fn, val_fn, train, cfg, purpose_rng(cfg.train.seed, STUDENT_BATCHES),
         report, on_epoch, after_backward=lambda: _check_no_teacher_grads(teacher))
    _check_no_teacher_grads(teacher)
    return student, report


def evaluate_student(student: StudentModel, split: SplitData, name: str, method: str,
                     chunk: int = 100) -> metrics.MetricsRow:
    pred = student_predict(student, split, chunk)
    m = metrics.evaluate(pred, split.y)
    n_params = sum(p.size for p in student.inference_parameters().values())
    return metrics.MetricsRow(name, method, int(n_params), m["mse"], m["mae"], m["ssim"])


def evaluate_teacher(teacher: TeacherModel, split: SplitData, name: str, method: str,
                     chunk: int = 100) -> metrics.MetricsRow:
    pred = teacher_predict(teacher, split, chunk)
    m = metrics.evaluate(pred, split.y)
    return metrics.MetricsRow(name, method, teacher.num_parameters(), m["mse"], m["mae"], m["ssim"])
