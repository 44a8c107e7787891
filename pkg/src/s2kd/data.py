"""Synthetic advection-diffusion benchmark with a privileged descriptor channel.

Each sequence evolves a 2-D scalar field under constant-velocity upwind
advection and 5-point diffusion. Walls carry no diffusive flux; advected
material leaves through the downstream wall and nothing enters upstream. Gaussian bumps
("events") are injected at their onset frames. The descriptor records the
velocity, diffusivity and every event, including events whose onset falls in
the forecast horizon and therefore cannot be inferred from the input frames.

Descriptor row layout (width ``3 + 6 * e_max``)::

    vx, vy, kappa, then per event slot: onset, center_x, center_y, amplitude, radius, pad_flag
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from ._accel import USE_NUMBA, njit
from .config import DataConfig, format_value, parse_keyvalue
from .errors import ConfigurationError, FormatError, InputError
from .formats import load_array, save_array

GLOBAL_FIELDS = 3
EVENT_FIELDS = 6
SPLITS = ("train", "val", "test")
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
FORMAT_VERSION = 1
# Fourier harmonics used to featurise event position and onset for the encoder
N_HARMONICS = 3


def descriptor_width(e_max: int) -> int:
    return GLOBAL_FIELDS + EVENT_FIELDS * e_max


@dataclass
class Event:
    onset: int
    center_x: float
    center_y: float
    amplitude: float
    radius: float


@dataclass
class PrivilegedDescriptor:
    velocity: tuple
    diffusion: float
    events: list = field(default_factory=list)

    def to_row(self, e_max: int) -> np.ndarray:
        if len(self.events) > e_max:
            raise InputError(f"{len(self.events)} events exceed e_max={e_max}")
        row = np.zeros(descriptor_width(e_max))
        row[:3] = (self.velocity[0], self.velocity[1], self.diffusion)
        for slot in range(e_max):
            base = GLOBAL_FIELDS + EVENT_FIELDS * slot
            if slot < len(self.events):
                e = self.events[slot]
                row[base:base + 5] = (e.onset, e.center_x, e.center_y, e.amplitude, e.radius)
            else:
                row[base + 5] = 1.0
        return row

    @classmethod
    def from_row(cls, row, e_max: int) -> "PrivilegedDescriptor":
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (descriptor_width(e_max),):
            raise InputError(f"descriptor row has shape {row.shape}, expected ({descriptor_width(e_max)},)")
        events = []
        for slot in range(e_max):
            base = GLOBAL_FIELDS + EVENT_FIELDS * slot
            if row[base + 5] == 0.0:
                onset, cx, cy, amp, rad = row[base:base + 5]
                events.append(Event(int(round(onset)), cx, cy, amp, rad))
        return cls((row[0], row[1]), row[2], events)


# ---------------------------------------------------------------- simulation kernels


@njit(cache=True)
def _step_numba(u, vx, vy, kappa, dt, n_sub):
    h, w = u.shape
    out = u.copy()
    fx = np.zeros((h, w + 1))
    fy = np.zeros((h + 1, w))
    for _ in range(n_sub):
        for i in range(h):
            for j in range(1, w):
                left = out[i, j - 1]
                right = out[i, j]
                up = left if vx > 0 else right
                fx[i, j] = vx * up - kappa * (right - left)
            fx[i, 0] = vx * out[i, 0] if vx < 0 else 0.0
            fx[i, w] = vx * out[i, w - 1] if vx > 0 else 0.0
        for i in range(1, h):
            for j in range(w):
                lo = out[i - 1, j]
                hi = out[i, j]
                up = lo if vy > 0 else hi
                fy[i, j] = vy * up - kappa * (hi - lo)
        for j in range(w):
            fy[0, j] = vy * out[0, j] if vy < 0 else 0.0
            fy[h, j] = vy * out[h - 1, j] if vy > 0 else 0.0
        for i in range(h):
            for j in range(w):
                out[i, j] = out[i, j] - dt * ((fx[i, j + 1] - fx[i, j]) + (fy[i + 1, j] - fy[i, j]))
    return out


def _step_numpy(u, vx, vy, kappa, dt, n_sub):
    h, w = u.shape
    out = u.copy()
    fx = np.zeros((h, w + 1))
    fy = np.zeros((h + 1, w))
    for _ in range(n_sub):
        left, right = out[:, :-1], out[:, 1:]
        fx[:, 1:-1] = vx * (left if vx > 0 else right) - kappa * (right - left)
        lo, hi = out[:-1, :], out[1:, :]
        fy[1:-1, :] = vy * (lo if vy > 0 else hi) - kappa * (hi - lo)
        fx[:, 0] = vx * out[:, 0] if vx < 0 else 0.0
        fx[:, -1] = vx * out[:, -1] if vx > 0 else 0.0
        fy[0, :] = vy * out[0, :] if vy < 0 else 0.0
        fy[-1, :] = vy * out[-1, :] if vy > 0 else 0.0
        out = out - dt * ((fx[:, 1:] - fx[:, :-1]) + (fy[1:, :] - fy[:-1, :]))
    return out


_step = _step_numba if USE_NUMBA else _step_numpy


def substeps(vx: float, vy: float, kappa: float) -> int:
    """Smallest sub-step count keeping the explicit scheme monotone in 2-D."""
    return max(1, math.ceil(abs(vx) + abs(vy) + 4.0 * kappa - 1e-12))


def advect_diffuse(u, vx: float, vy: float, kappa: float) -> np.ndarray:
    """Advance the field by one unit time step; mass is conserved whenever the velocity is zero."""
    n_sub = substeps(vx, vy, kappa)
    return _step(np.ascontiguousarray(u, dtype=np.float64), float(vx), float(vy), float(kappa),
                 1.0 / n_sub, n_sub)


def gaussian_bump(h: int, w: int, cx: float, cy: float, amplitude: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * radius ** 2))


def simulate(initial, descriptor: PrivilegedDescriptor, n_frames: int) -> np.ndarray:
    """Roll the field forward; frame ``t`` includes every event with onset ``t``."""
    h, w = initial.shape
    u = np.array(initial, dtype=np.float64)
    vx, vy = descriptor.velocity
    frames = np.empty((n_frames, h, w))
    for t in range(n_frames):
        for e in descriptor.events:
            if e.onset == t:
                u = u + gaussian_bump(h, w, e.center_x, e.center_y, e.amplitude, e.radius)
        frames[t] = u
        if t + 1 < n_frames:
            u = advect_diffuse(u, vx, vy, descriptor.diffusion)
    return frames


def sample_sequence(cfg: DataConfig, rng: np.random.Generator):
    """Draw one (frames ``[T, H, W, C]``, descriptor) pair."""
    h, w, n = cfg.height, cfg.width, cfg.frames
    velocity = tuple(rng.uniform(-cfg.velocity_max, cfg.velocity_max, size=2))
    kappa = rng.uniform(cfg.diffusion_min, cfg.diffusion_max)
    n_events = int(rng.integers(0, cfg.e_max + 1))
    events = []
    for _ in range(n_events):
        events.append(Event(
            int(rng.integers(0, n)),
            rng.uniform(0, w - 1),
            rng.uniform(0, h - 1),
            rng.uniform(cfg.event_amp_min, cfg.event_amp_max),
            rng.uniform(cfg.event_radius_min, cfg.event_radius_max),
        ))
    events.sort(key=lambda e: e.onset)
    descriptor = PrivilegedDescriptor(velocity, kappa, events)

    initial = np.zeros((h, w))
    for _ in range(int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))):
        initial += gaussian_bump(h, w, rng.uniform(0, w - 1), rng.uniform(0, h - 1),
                                 rng.uniform(cfg.blob_amp_min, cfg.blob_amp_max),
                                 rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max))
    channels = [simulate(initial, descriptor, n)]
    # extra channels are independent tracers carried by the same flow
    for _ in range(1, cfg.channels):
        extra = gaussian_bump(h, w, rng.uniform(0, w - 1), rng.uniform(0, h - 1),
                              rng.uniform(cfg.blob_amp_min, cfg.blob_amp_max),
                              rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max))
        channels.append(simulate(extra, descriptor, n))
    return np.stack(channels, axis=-1), descriptor


def sequence_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


def generate_split(cfg: DataConfig, seed: int, split: str, count: int):
    frames = np.empty((count, cfg.frames, cfg.height, cfg.width, cfg.channels), dtype=np.float32)
    descriptors = np.empty((count, descriptor_width(cfg.e_max)), dtype=np.float32)
    for i in range(count):
        seq, desc = sample_sequence(cfg, sequence_rng(seed, split, i))
        frames[i] = seq
        descriptors[i] = desc.to_row(cfg.e_max)
    if not np.all(np.isfinite(frames)) or np.abs(frames).max() > 10.0:
        raise ConfigurationError(f"{split}: generated values left the [-10, 10] range; reduce amplitudes")
    return frames, descriptors


@dataclass
class DatasetManifest:
    counts: dict
    data: DataConfig
    seed: int
    format_version: int = FORMAT_VERSION

    def to_text(self) -> str:
        d = self.data
        lines = [
            "# synthetic advection-diffusion benchmark",
            f"format_version = {self.format_version}",
            f"seed = {self.seed}",
        ]
        lines += [f"counts.{s} = {self.counts[s]}" for s in SPLITS]
        lines += [f"shape.{k} = {getattr(d, k)}" for k in ("t_in", "t_out", "height", "width", "channels")]
        lines += [f"descriptor.e_max = {d.e_max}", f"descriptor.width = {descriptor_width(d.e_max)}"]
        for name in ("velocity_max", "diffusion_min", "diffusion_max", "blobs_min", "blobs_max",
                     "blob_amp_min", "blob_amp_max", "blob_radius_min", "blob_radius_max",
                     "event_amp_min", "event_amp_max", "event_radius_min", "event_radius_max"):
            lines.append(f"physics.{name} = {format_value(getattr(d, name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        values = {k: (v, n) for k, v, n in parse_keyvalue(text)}
        try:
            version = int(values.pop("format_version")[0])
            seed = int(values.pop("seed")[0])
            counts = {s: int(values.pop(f"counts.{s}")[0]) for s in SPLITS}
            d = DataConfig()
            for k in ("t_in", "t_out", "height", "width", "channels"):
                setattr(d, k, int(values.pop(f"shape.{k}")[0]))
            d.e_max = int(values.pop("descriptor.e_max")[0])
            width = int(values.pop("descriptor.width")[0])
            for key in list(values):
                if key.startswith("physics."):
                    name = key.split(".", 1)[1]
                    kind = type(getattr(d, name))
                    setattr(d, name, kind(values.pop(key)[0]))
        except (KeyError, AttributeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}", 0) from None
        if values:
            key, (_, line) = next(iter(values.items()))
            raise FormatError(f"unknown manifest key {key!r} on line {line}", 0)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest version {version}", 0)
        if width != descriptor_width(d.e_max):
            raise FormatError(f"descriptor width {width} inconsistent with e_max={d.e_max}", 0)
        d.n_train, d.n_val, d.n_test = counts["train"], counts["val"], counts["test"]
        return cls(counts, d, seed, version)


def generate(cfg: DataConfig, seed: int, out_dir) -> DatasetManifest:
    """Write ``frames_<split>.s2kd``, ``descriptors_<split>.s2kd`` and ``manifest``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split in SPLITS:
        frames, descriptors = generate_split(cfg, seed, split, counts[split])
        save_array(out / f"frames_{split}.s2kd", frames)
        save_array(out / f"descriptors_{split}.s2kd", descriptors)
    manifest = DatasetManifest(counts, cfg, seed)
    (out / "manifest").write_text(manifest.to_text())
    return manifest


@dataclass
class SplitData:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def batch(self, idx) -> "SplitData":
        return SplitData(self.x[idx], self.s[idx], self.y[idx])


class Dataset:
    """An on-disk dataset directory loaded into memory."""

    def __init__(self, manifest: DatasetManifest, splits: dict):
        self.manifest = manifest
        self.splits = splits

    @property
    def config(self) -> DataConfig:
        return self.manifest.data

    def __getitem__(self, split: str) -> SplitData:
        return self.splits[split]

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        manifest = DatasetManifest.from_text((directory / "manifest").read_text())
        d = manifest.data
        splits = {}
        for split in SPLITS:
            frames = load_array(directory / f"frames_{split}.s2kd", expect_rank=5)
            desc = load_array(directory / f"descriptors_{split}.s2kd", expect_rank=2)
            expected = (manifest.counts[split], d.frames, d.height, d.width, d.channels)
            if frames.shape != expected:
                raise FormatError(f"frames_{split}: shape {frames.shape} does not match manifest {expected}", 0)
            if desc.shape != (manifest.counts[split], descriptor_width(d.e_max)):
                raise FormatError(f"descriptors_{split}: shape {desc.shape} does not match manifest", 0)
            splits[split] = SplitData(frames[:, :d.t_in], desc, frames[:, d.t_in:])
        return cls(manifest, splits)

    @classmethod
    def from_arrays(cls, cfg: DataConfig, seed: int = 0, **splits) -> "Dataset":
        counts = {k: len(v) for k, v in splits.items()}
        for s in SPLITS:
            counts.setdefault(s, 0)
        return cls(DatasetManifest(counts, cfg, seed), splits)


# ---------------------------------------------------------------- descriptor encoder


def descriptor_features(rows, cfg: DataConfig):
    """Featurise descriptor rows.

    Returns ``(global_feats [..., 3], event_feats [..., E, F], pad_mask [..., E, 1])``.
    Event positions and onsets are expanded into a few sinusoidal harmonics so a
    per-token linear embedding can express location-dependent attention.
    """
    rows = np.asarray(rows, dtype=np.float64)
    width = descriptor_width(cfg.e_max)
    if rows.shape[-1] != width:
        raise InputError(f"descriptor width {rows.shape[-1]} does not match schema width {width}")
    lead = rows.shape[:-1]
    vmax = cfg.velocity_max or 1.0
    kmax = cfg.diffusion_max or 1.0
    glob = np.stack([rows[..., 0] / vmax, rows[..., 1] / vmax, rows[..., 2] / kmax], axis=-1)
    slots = rows[..., GLOBAL_FIELDS:].reshape(lead + (cfg.e_max, EVENT_FIELDS))
    pad = slots[..., 5:6]
    live = 1.0 - pad
    onset = slots[..., 0] / max(cfg.frames - 1, 1)
    cx = slots[..., 1] / max(cfg.width - 1, 1)
    cy = slots[..., 2] / max(cfg.height - 1, 1)
    amp = slots[..., 3]
    rad = slots[..., 4] / (cfg.event_radius_max or 1.0)
    parts = [onset, cx, cy, amp, rad]
    for k in range(1, N_HARMONICS + 1):
        for v in (onset, cx, cy):
            parts += [np.sin(math.pi * k * v), np.cos(math.pi * k * v)]
    feats = np.stack(parts, axis=-1) * live
    return glob, feats, pad


def event_feature_width() -> int:
    return 5 + 6 * N_HARMONICS


class DescriptorEncoder(nn.Module):
    """Embeds a descriptor as ``1 + e_max`` tokens and mixes them with one self-attention block."""

    def __init__(self, rng, cfg: DataConfig, d_model: int, n_heads: int):
        self.global_embed = nn.Linear(rng, GLOBAL_FIELDS, d_model)
        self.event_embed = nn.Linear(rng, event_feature_width(), d_model)
        self.pad_embed = nn.zeros((d_model,))
        self.slot_pos = nn.zeros((1 + cfg.e_max, d_model))
        self.block = nn.AttentionBlock(rng, d_model, n_heads)
        self.schema = cfg

    def __call__(self, rows) -> T.Tensor:
        return encode_descriptor(rows, self)


def encode_descriptor(rows, encoder: DescriptorEncoder) -> T.Tensor:
    """Descriptor rows ``[..., K]`` -> semantic tokens ``[..., 1 + e_max, D]``."""
    cfg = encoder.schema
    rows = np.asarray(rows.data if isinstance(rows, T.Tensor) else rows, dtype=np.float64)
    if rows.ndim == 1:
        z = encode_descriptor(rows[None], encoder)
        return T.reshape(z, z.shape[1:])
    glob, feats, pad = descriptor_features(rows, cfg)
    lead = glob.shape[:-1]
    tokens = [T.reshape(encoder.global_embed(T.Tensor(glob)), lead + (1, encoder.global_embed.d_out))]
    if cfg.e_max:
        live = T.Tensor(1.0 - pad)
        ev = T.mul(encoder.event_embed(T.Tensor(feats)), live)
        ev = T.add(ev, T.mul(T.Tensor(pad), encoder.pad_embed))
        tokens.append(ev)
    z = T.concat(tokens, axis=-2) if len(tokens) > 1 else tokens[0]
    z = T.add(z, encoder.slot_pos)
    return encoder.block(z)
