"""Experiment configuration and the ``key = value`` text format.

The same text format serves configs and dataset manifests: ``#`` starts a
comment, keys are dotted (``train.lr = 0.001``), booleans are ``true``/``false``
and lists are comma-separated.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError


class ConfigParseError(ConfigurationError):
    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def parse_keyvalue(text: str) -> list[tuple[str, str, int]]:
    """Return ``(key, raw_value, line_number)`` triples in file order."""
    entries = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigParseError("empty key", lineno)
        if key in seen:
            raise ConfigParseError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        entries.append((key, value, lineno))
    return entries


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, kind, key: str, lineno):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        origin = typing.get_origin(kind)
        if origin in (list, tuple):
            (item,) = typing.get_args(kind)[:1]
            return [_coerce(part.strip(), item, key, lineno) for part in raw.split(",") if part.strip()]
    except ValueError:
        pass
    name = getattr(kind, "__name__", str(kind))
    raise ConfigParseError(f"{key}: cannot read {raw!r} as {name}", lineno)


@dataclass
class DataConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    t_in: int = 5
    t_out: int = 5
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    e_max: int = 2
    velocity_max: float = 0.5
    diffusion_min: float = 0.0
    diffusion_max: float = 0.1
    blobs_min: int = 2
    blobs_max: int = 4
    blob_amp_min: float = 0.3
    blob_amp_max: float = 1.0
    blob_radius_min: float = 1.5
    blob_radius_max: float = 3.5
    event_amp_min: float = 0.5
    event_amp_max: float = 1.0
    event_radius_min: float = 1.0
    event_radius_max: float = 2.5

    @property
    def frames(self) -> int:
        return self.t_in + self.t_out

    def validate(self, patch: int | None = None) -> None:
        for name in ("height", "width", "channels", "t_in", "t_out", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"data.{name} must be >= 1")
        if self.e_max < 0:
            raise ConfigurationError("data.e_max must be >= 0")
        if patch is not None and (self.height % patch or self.width % patch):
            raise ConfigurationError(
                f"frame size H={self.height}, W={self.width} is not divisible by patch size p={patch}"
            )
        # per-step CFL bounds; the simulator sub-steps to satisfy the combined 2-D bound
        if self.velocity_max < 0 or self.velocity_max * 2 ** 0.5 > 1.0:
            raise ConfigurationError(
                f"CFL violation: max speed {self.velocity_max * 2 ** 0.5:.3f} cells/step exceeds 1"
            )
        if not 0.0 <= self.diffusion_min <= self.diffusion_max <= 0.25:
            raise ConfigurationError(
                f"CFL violation: diffusion range [{self.diffusion_min}, {self.diffusion_max}] "
                "must lie within [0, 0.25] cells^2/step"
            )
        pairs = [("blobs_min", "blobs_max"), ("blob_amp_min", "blob_amp_max"),
                 ("blob_radius_min", "blob_radius_max"), ("event_amp_min", "event_amp_max"),
                 ("event_radius_min", "event_radius_max")]
        for lo, hi in pairs:
            if not 0 <= getattr(self, lo) <= getattr(self, hi):
                raise ConfigurationError(f"data.{lo} must satisfy 0 <= {lo} <= {hi}")


@dataclass
class ModelConfig:
    patch: int = 4
    d_model: int = 64
    d_student: int = 16
    n_align: int = 2
    n_enc: int = 2
    n_heads: int = 4
    student_heads: int = 2
    student_depth: int = 1
    student_variant: str = "attention"
    spectral_axis: str = "token"

    def validate(self) -> None:
        if self.patch < 1:
            raise ConfigurationError("model.patch must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"model.d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_student % self.student_heads:
            raise ConfigurationError(
                f"model.d_student={self.d_student} not divisible by student_heads={self.student_heads}"
            )
        if not 2 <= self.d_student <= self.d_model:
            raise ConfigurationError("model.d_student must lie in [2, d_model]")
        if self.n_align < 0 or self.n_enc < 0 or self.student_depth < 0:
            raise ConfigurationError("layer counts must be >= 0")
        if self.student_variant not in ("attention", "mixer"):
            raise ConfigurationError(f"model.student_variant must be attention or mixer, got {self.student_variant!r}")
        if self.spectral_axis not in ("token", "feature"):
            raise ConfigurationError(f"model.spectral_axis must be token or feature, got {self.spectral_axis!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 10
    lam: float = 1.0
    beta: float = 0.5
    seed: int = 42
    float_width: int = 32
    eval_batch_size: int = 100

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigurationError("train.lr must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("train.max_epochs must be >= 1")
        if self.lam < 0 or self.beta < 0:
            raise ConfigurationError("train.lambda and train.beta must be >= 0")
        if self.float_width not in (32, 64):
            raise ConfigurationError("train.float_width must be 32 or 64")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be >= 1")


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs"


# text keys that are not valid Python identifiers
_ALIASES = {"train.lambda": "train.lam"}
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.data.validate(self.model.patch)
        self.train.validate()
        return self

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for key, raw, lineno in parse_keyvalue(text):
            target = _ALIASES.get(key, key)
            block, _, name = target.partition(".")
            section = getattr(cfg, block, None) if block in _BLOCKS else None
            if section is None or not name or name not in _field_types(type(section)):
                raise ConfigParseError(f"unknown key {key!r}", lineno)
            setattr(section, name, _coerce(raw, _field_types(type(section))[name], key, lineno))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for block in _BLOCKS:
            section = getattr(self, block)
            lines.append(f"# {block}")
            for f in dataclasses.fields(section):
                key = f"{block}.{f.name}"
                key = _REVERSE_ALIASES.get(key, key)
                lines.append(f"{key} = {format_value(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"


_BLOCKS = ("data", "model", "train", "paths")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}
