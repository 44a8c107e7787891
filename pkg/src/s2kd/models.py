"""Privileged multimodal teacher, vision-only students, decoder and projection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .config import DataConfig, ModelConfig
from .data import DescriptorEncoder, descriptor_width
from .errors import DimensionError, InputError


@dataclass
class LatentBundle:
    z_v: T.Tensor
    z_s: T.Tensor
    z_fused: T.Tensor
    layers: list = field(default_factory=list)  # Z_v^(0) .. Z_v^(N)


class Decoder(nn.Module):
    """Per-token unpatching followed by a learned ``T_in -> T_out`` mix along time."""

    def __init__(self, rng, data: DataConfig, d_model: int, patch: int):
        self.token_out = nn.Linear(rng, d_model, patch * patch * data.channels)
        self.time_mix = nn.uniform_fan_in(rng, data.t_in, (data.t_in, data.t_out))
        self.time_bias = nn.zeros((data.t_out,))
        self.data = data
        self.patch = patch

    @property
    def n_patches(self) -> int:
        return (self.data.height // self.patch) * (self.data.width // self.patch)

    def __call__(self, z) -> T.Tensor:
        return decode(z, self)


def decode(z, decoder: Decoder) -> T.Tensor:
    """``[..., T_in * P, D]`` latent -> ``[..., T_out, H, W, C]`` frames."""
    z = T.as_tensor(z)
    d = decoder.data
    p = decoder.patch
    n_p = decoder.n_patches
    if z.ndim < 2 or z.shape[-2] != d.t_in * n_p:
        raise DimensionError(f"decoder expects {d.t_in * n_p} tokens, got latent {z.shape}")
    lead = z.shape[:-2]
    width = n_p * p * p * d.channels
    patches = decoder.token_out(z)  # [..., T_in * P, p*p*C]
    per_time = T.reshape(patches, lead + (d.t_in, width))
    mixed = T.add(T.matmul(T.swapaxes(per_time, -1, -2), decoder.time_mix), decoder.time_bias)
    out_tokens = T.reshape(T.swapaxes(mixed, -1, -2), lead + (d.t_out * n_p, p * p * d.channels))
    return nn.unpatchify(out_tokens, d.t_out, d.height, d.width, d.channels, p)


class VisualEncoder(nn.Module):
    """Patch embedding followed by a stack of self-attention blocks."""

    def __init__(self, rng, data: DataConfig, d_model: int, patch: int, depth: int, n_heads: int):
        self.patch_embed = nn.PatchEmbed(rng, data.t_in, data.height, data.width, data.channels,
                                         patch, d_model)
        self.blocks = [nn.AttentionBlock(rng, d_model, n_heads) for _ in range(depth)]

    def __call__(self, x) -> T.Tensor:
        z = self.patch_embed(x)
        for block in self.blocks:
            z = block(z)
        return z


class MixerEncoder(nn.Module):
    """Token-mixing then channel-mixing linear maps, each with a residual and layer norm."""

    def __init__(self, rng, data: DataConfig, d_model: int, patch: int, depth: int):
        self.patch_embed = nn.PatchEmbed(rng, data.t_in, data.height, data.width, data.channels,
                                         patch, d_model)
        n_tokens = self.patch_embed.pos.shape[0]
        self.token_mix = [nn.Linear(rng, n_tokens, n_tokens) for _ in range(depth)]
        self.channel_mix = [nn.Linear(rng, d_model, d_model) for _ in range(depth)]
        self.ln_gain = [nn.ones((d_model,)) for _ in range(2 * depth)]
        self.ln_bias = [nn.zeros((d_model,)) for _ in range(2 * depth)]

    def __call__(self, x) -> T.Tensor:
        z = self.patch_embed(x)
        for i, (tok, ch) in enumerate(zip(self.token_mix, self.channel_mix)):
            mixed = T.swapaxes(tok(T.swapaxes(z, -1, -2)), -1, -2)
            z = T.layer_norm(T.add(z, mixed), self.ln_gain[2 * i], self.ln_bias[2 * i])
            z = T.layer_norm(T.add(z, ch(z)), self.ln_gain[2 * i + 1], self.ln_bias[2 * i + 1])
        return z


class TeacherModel(nn.Module):
    def __init__(self, rng, data: DataConfig, model: ModelConfig, privileged: bool = True):
        d = model.d_model
        self.visual_encoder = VisualEncoder(rng, data, d, model.patch, model.n_enc, model.n_heads)
        self.privileged_encoder = DescriptorEncoder(rng, data, d, model.n_heads)
        self.alignment = [nn.AttentionBlock(rng, d, model.n_heads) for _ in range(model.n_align)]
        self.decoder = Decoder(rng, data, d, model.patch)
        self.data_cfg = data
        self.privileged = privileged
        if not privileged:
            # vision-only control: value projections pinned at zero so the descriptor cannot leak in
            for block in self.alignment:
                for p in (block.v_proj.weight, block.v_proj.bias):
                    p.data = np.zeros_like(p.data)
                    p.requires_grad = False

    def forward(self, x, s) -> tuple:
        x = _check_frames(x, self.data_cfg, "teacher")
        s = np.asarray(s.data if isinstance(s, T.Tensor) else s)
        width = descriptor_width(self.data_cfg.e_max)
        if s.shape != x.shape[:-4] + (width,):
            raise InputError(f"descriptor batch {s.shape} does not match frames {x.shape} (width {width})")
        z_v = self.visual_encoder(x)
        z_s = self.privileged_encoder(s)
        layers = [z_v]
        z = z_v
        for block in self.alignment:
            z = nn.attention_block(z, z_s, block)
            layers.append(z)
        return self.decoder(z), LatentBundle(z_v, z_s, z, layers)

    __call__ = forward


class StudentModel(nn.Module):
    def __init__(self, rng, data: DataConfig, model: ModelConfig):
        dg = model.d_student
        if model.student_variant == "mixer":
            self.encoder = MixerEncoder(rng, data, dg, model.patch, model.student_depth)
        else:
            self.encoder = VisualEncoder(rng, data, dg, model.patch, model.student_depth,
                                         model.student_heads)
        self.decoder = Decoder(rng, data, dg, model.patch)
        self.projection = nn.Linear(rng, dg, model.d_model)
        self.data_cfg = data
        self.variant = model.student_variant

    def inference_parameters(self):
        return {k: p for k, p in self.named_parameters().items() if not k.startswith("projection.")}

    def forward(self, x) -> tuple:
        x = _check_frames(x, self.data_cfg, "student")
        z = self.encoder(x)
        return self.decoder(z), self.projection(z)

    __call__ = forward

    def predict(self, x) -> T.Tensor:
        x = _check_frames(x, self.data_cfg, "student")
        return self.decoder(self.encoder(x))


def _check_frames(x, data: DataConfig, who: str) -> T.Tensor:
    x = T.as_tensor(x)
    want = (data.t_in, data.height, data.width, data.channels)
    if x.ndim < 4 or x.shape[-4:] != want:
        raise InputError(f"{who} expects frames shaped [..., {', '.join(map(str, want))}], got {x.shape}")
    return x


def build_teacher(data: DataConfig, model: ModelConfig, rng, privileged: bool = True) -> TeacherModel:
    return TeacherModel(rng, data, model, privileged)


def build_student(data: DataConfig, model: ModelConfig, rng) -> StudentModel:
    return StudentModel(rng, data, model)


def teacher_forward(x, s, teacher: TeacherModel):
    return teacher.forward(x, s)


def student_forward(x, student: StudentModel):
    return student.forward(x)
