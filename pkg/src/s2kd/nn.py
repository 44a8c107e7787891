"""Layers, attention blocks, patch embedding, Adam and the plateau schedule."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor


class Module:
    """Parameter container; tensors and sub-modules are discovered in attribute order."""

    frozen = False

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                params[name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        params[f"{name}.{i}"] = item
                    elif isinstance(item, Module):
                        params.update(item.named_parameters(f"{name}.{i}."))
        return params

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, p) for k, p in self.named_parameters().items() if p.requires_grad)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ContractError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class Linear(Module):
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = uniform_fan_in(rng, d_in, (d_in, d_out))
        self.bias = zeros((d_out,))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear layer expects width {self.d_in}, got input {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)


class AttentionBlock(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigurationError(f"width {d_model} is not divisible by {n_heads} heads")
        self.q_proj = Linear(rng, d_model, d_model)
        self.k_proj = Linear(rng, d_model, d_model)
        self.v_proj = Linear(rng, d_model, d_model)
        self.out_proj = Linear(rng, d_model, d_model)
        self.ln_gain = ones((d_model,))
        self.ln_bias = zeros((d_model,))
        self.n_heads = n_heads

    @property
    def d_model(self) -> int:
        return self.q_proj.d_in

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def __call__(self, x_query, x_context=None) -> Tensor:
        return attention_block(x_query, x_query if x_context is None else x_context, self)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    d = x.shape[-1]
    x = T.reshape(x, x.shape[:-1] + (n_heads, d // n_heads))
    return T.swapaxes(x, -2, -3)  # [..., H, L, d_k]


def _merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)  # [..., L, H, d_k]
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def attention_block(x_query, x_context, params: AttentionBlockParams) -> Tensor:
    """Multi-head (cross-)attention followed by a residual and layer norm.

    Queries come from ``x_query``; keys and values from ``x_context``. Passing the
    same tensor for both gives self-attention.
    """
    x_query, x_context = T.as_tensor(x_query), T.as_tensor(x_context)
    d = params.d_model
    if x_query.shape[-1] != d or x_context.shape[-1] != d:
        raise DimensionError(
            f"attention width {d} does not match query {x_query.shape} / context {x_context.shape}"
        )
    if d % params.n_heads:
        raise ConfigurationError(f"width {d} is not divisible by {params.n_heads} heads")
    q = _split_heads(params.q_proj(x_query), params.n_heads)
    k = _split_heads(params.k_proj(x_context), params.n_heads)
    v = _split_heads(params.v_proj(x_context), params.n_heads)
    logits = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(params.d_k))
    attended = _merge_heads(T.matmul(T.softmax(logits, axis=-1), v))
    return T.layer_norm(T.add(x_query, params.out_proj(attended)), params.ln_gain, params.ln_bias)


AttentionBlockParams = AttentionBlock


def patchify(frames, patch: int) -> Tensor:
    """``[..., T, H, W, C]`` -> ``[..., T*(H/p)*(W/p), p*p*C]`` in (t, row, col) raster order."""
    frames = T.as_tensor(frames)
    *lead, t, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"frame size H={h}, W={w} is not divisible by patch size p={patch}")
    hp, wp = h // patch, w // patch
    n = len(lead)
    x = T.reshape(frames, tuple(lead) + (t, hp, patch, wp, patch, c))
    axes = tuple(range(n)) + tuple(n + a for a in (0, 1, 3, 2, 4, 5))
    x = T.transpose(x, axes)
    return T.reshape(x, tuple(lead) + (t * hp * wp, patch * patch * c))


def unpatchify(tokens, t: int, h: int, w: int, c: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = T.as_tensor(tokens)
    lead = tokens.shape[:-2]
    hp, wp = h // patch, w // patch
    if tokens.shape[-2:] != (t * hp * wp, patch * patch * c):
        raise DimensionError(
            f"cannot unpatch tokens {tokens.shape} into frames of T={t}, H={h}, W={w}, C={c}, p={patch}"
        )
    n = len(lead)
    x = T.reshape(tokens, tuple(lead) + (t, hp, wp, patch, patch, c))
    axes = tuple(range(n)) + tuple(n + a for a in (0, 1, 3, 2, 4, 5))
    x = T.transpose(x, axes)
    return T.reshape(x, tuple(lead) + (t, h, w, c))


class PatchEmbed(Module):
    def __init__(self, rng, frames: int, height: int, width: int, channels: int, patch: int, d_model: int):
        if height % patch or width % patch:
            raise ConfigurationError(
                f"frame size H={height}, W={width} is not divisible by patch size p={patch}"
            )
        self.embed = Linear(rng, patch * patch * channels, d_model)
        self.pos = zeros((frames * (height // patch) * (width // patch), d_model))
        self.patch = patch

    def __call__(self, frames) -> Tensor:
        return patch_embed(frames, self.patch, self.embed, self.pos)


def patch_embed(frames, patch: int, embed: Linear, pos=None) -> Tensor:
    tokens = embed(patchify(frames, patch))
    if pos is not None:
        if pos.shape != tokens.shape[-2:]:
            raise DimensionError(f"positional table {pos.shape} does not match tokens {tokens.shape}")
        tokens = T.add(tokens, pos)
    return tokens


class Adam:
    """Adam with bias correction. Parameters with ``requires_grad=False`` are skipped."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        live = [(k, p) for k, p in self.params.items() if p.requires_grad]
        for name, p in live:
            if p.grad is None:
                raise ContractError(f"no gradient for trainable parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in live:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def adam_step(params, state: Adam) -> Adam:
    """Functional spelling of :meth:`Adam.step`; gradients are read from ``.grad``."""
    if set(params) != set(state.params):
        raise ContractError("adam_step: parameter set differs from the optimizer state")
    state.step()
    return state


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, threshold: float = 0.0):
        if not 0.0 < factor < 1.0:
            raise ConfigurationError(f"plateau factor must lie in (0, 1), got {factor}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best * (1.0 - self.threshold):
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr
