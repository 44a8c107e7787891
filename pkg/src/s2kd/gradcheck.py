"""Registered finite-difference checks for every differentiable operation.

Each entry builds small 64-bit inputs from a fixed seed and compares the tape
gradient against central differences via :func:`s2kd.tensor.grad_check`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import DataConfig, ModelConfig
from .spectral import rfft_magnitude, spectral_loss

H = 1e-6


@dataclass
class CheckResult:
    op: str
    label: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def away_from_kinks(rng, shape, margin: float = 1e-3) -> np.ndarray:
    x = rng.normal(size=shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.normal(size=int(bad.sum()))
    return x


def _weights(rng, shape):
    # random projection so the scalar root depends on every output coordinate
    return T.Tensor(rng.normal(size=shape))


def _elementwise_checks(rng):
    out = []
    for kind in ("add", "sub", "mul"):
        a = away_from_kinks(rng, (3, 4))
        b = T.Tensor(away_from_kinks(rng, (3, 4)))
        w = _weights(rng, (3, 4))
        out.append((kind, f"{kind} wrt first operand",
                    lambda x, k=kind, b=b, w=w: T.sum(T.mul(T.elementwise(k, x, b), w)), a))
        out.append((kind, f"{kind} wrt second operand",
                    lambda x, k=kind, b=b, w=w: T.sum(T.mul(T.elementwise(k, b, x), w)), a))
        bias = T.Tensor(rng.normal(size=(4,)))
        out.append((kind, f"{kind} with broadcast operand",
                    lambda x, k=kind, bias=bias, w=w: T.sum(T.mul(T.elementwise(k, x, bias), w)), a))
    x = away_from_kinks(rng, (3, 4))
    w = _weights(rng, (3, 4))
    out.append(("scale", "scale by constant", lambda x, w=w: T.sum(T.mul(T.scale(x, -1.7), w)), x))
    out.append(("abs", "abs", lambda x, w=w: T.sum(T.mul(T.abs(x), w)), x))
    out.append(("square", "square", lambda x, w=w: T.sum(T.mul(T.square(x), w)), x))
    pos = np.abs(away_from_kinks(rng, (3, 4))) + 0.1
    out.append(("sqrt", "sqrt with epsilon", lambda x, w=w: T.sum(T.mul(T.sqrt_eps(x), w)), pos))
    return out


def _structural_checks(rng):
    out = []
    a = rng.normal(size=(4, 5))
    b = T.Tensor(rng.normal(size=(5, 3)))
    w = _weights(rng, (4, 3))
    out.append(("matmul", "matmul wrt left", lambda x: T.sum(T.mul(T.matmul(x, b), w)), a))
    left = T.Tensor(rng.normal(size=(4, 5)))
    out.append(("matmul", "matmul wrt right",
                lambda x: T.sum(T.mul(T.matmul(left, x), w)), rng.normal(size=(5, 3))))
    wb = _weights(rng, (2, 4, 3))
    out.append(("matmul", "batched matmul with shared right operand",
                lambda x: T.sum(T.mul(T.matmul(x, b), wb)), rng.normal(size=(2, 4, 5))))
    w6 = _weights(rng, (3, 2, 4))
    out.append(("reshape", "reshape + transpose",
                lambda x: T.sum(T.mul(T.transpose(T.reshape(x, (2, 3, 4)), (1, 0, 2)), w6)),
                rng.normal(size=(6, 4))))
    other = T.Tensor(rng.normal(size=(2, 4)))
    wc = _weights(rng, (5, 4))
    out.append(("concat", "concat along rows",
                lambda x: T.sum(T.mul(T.concat([x, other], axis=0), wc)), rng.normal(size=(3, 4))))
    ws = _weights(rng, (3,))
    out.append(("sum", "sum over an axis", lambda x: T.sum(T.mul(T.sum(x, axis=1), ws)),
                rng.normal(size=(3, 4))))
    wm = _weights(rng, (4,))
    out.append(("mean", "mean over an axis", lambda x: T.sum(T.mul(T.mean(x, axis=0), wm)),
                rng.normal(size=(3, 4))))
    return out


def _normalisation_checks(rng):
    out = []
    w = _weights(rng, (3, 5))
    for axis in (-1, 0):
        out.append(("softmax", f"softmax over axis {axis}",
                    lambda x, a=axis: T.sum(T.mul(T.softmax(x, axis=a), w)), rng.normal(size=(3, 5))))
    gain = T.Tensor(rng.normal(size=(8,)))
    bias = T.Tensor(rng.normal(size=(8,)))
    wl = _weights(rng, (3, 8))
    out.append(("layer_norm", "layer_norm wrt input",
                lambda x: T.sum(T.mul(T.layer_norm(x, gain, bias), wl)), rng.normal(size=(3, 8))))
    xin = T.Tensor(rng.normal(size=(3, 8)))
    out.append(("layer_norm", "layer_norm wrt gain",
                lambda g: T.sum(T.mul(T.layer_norm(xin, g, bias), wl)), rng.normal(size=(8,))))
    return out


def _attention_checks(rng):
    block = nn.AttentionBlock(rng, 8, 2)
    for p in block.parameters():
        p.data = rng.normal(scale=0.5, size=p.shape)
    ctx = T.Tensor(rng.normal(size=(3, 8)))
    w = _weights(rng, (4, 8))
    out = [
        ("attention", "cross-attention block wrt query",
         lambda x: T.sum(T.mul(nn.attention_block(x, ctx, block), w)), rng.normal(size=(4, 8))),
    ]
    q = T.Tensor(rng.normal(size=(4, 8)))
    out.append(("attention", "cross-attention block wrt context",
                lambda x: T.sum(T.mul(nn.attention_block(q, x, block), w)), rng.normal(size=(3, 8))))
    return out


def _spectral_checks(rng):
    out = []
    for n in (8, 6):
        z = _spectrum_safe(rng, (n, 3))
        w = _weights(rng, (n // 2 + 1, 3))
        out.append(("rfft_magnitude", f"magnitude spectrum, L={n}",
                    lambda x, w=w: T.sum(T.mul(rfft_magnitude(x).values, w)), z))
        target = T.Tensor(_spectrum_safe(rng, (n, 3)))
        out.append(("spectral_loss", f"spectral loss, L={n}",
                    lambda x, t=target: spectral_loss(x, t), z))
    return out


def _spectrum_safe(rng, shape, floor: float = 1e-3) -> np.ndarray:
    """Draw inputs whose spectral magnitudes all exceed ``floor`` (away from the |.| kink)."""
    while True:
        z = rng.normal(size=shape)
        mags = np.abs(np.fft.rfft(z, axis=0))
        if mags.min() > floor:
            return z


def micro_config():
    data = DataConfig(height=4, width=4, channels=1, t_in=2, t_out=2, e_max=1)
    model = ModelConfig(patch=2, d_model=8, d_student=4, n_align=1, n_enc=1, n_heads=2,
                        student_heads=1, student_depth=1)
    return data, model


def _set_param(module, dotted: str, value: T.Tensor) -> None:
    *path, leaf = dotted.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    if isinstance(obj, list):
        obj[int(leaf)] = value
    else:
        setattr(obj, leaf, value)


def _loss_checks(rng):
    from .data import PrivilegedDescriptor, Event
    from .distill import DistillConfig, semantic_loss, student_objective
    from .models import build_student, build_teacher

    out = []
    zt = T.Tensor(rng.normal(size=(6, 4)))
    out.append(("semantic_loss", "semantic loss", lambda x: semantic_loss(x, zt), rng.normal(size=(6, 4))))

    data, model = micro_config()
    teacher = build_teacher(data, model, np.random.default_rng(7))
    student = build_student(data, model, np.random.default_rng(8))
    for p in teacher.parameters() + student.parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    teacher.freeze()
    x = rng.uniform(size=(2, data.t_in, data.height, data.width, data.channels))
    y = rng.uniform(size=(2, data.t_out, data.height, data.width, data.channels))
    s = np.stack([
        PrivilegedDescriptor((0.2, -0.1), 0.05, [Event(3, 1.0, 2.0, 0.7, 1.2)]).to_row(data.e_max),
        PrivilegedDescriptor((-0.3, 0.4), 0.02, []).to_row(data.e_max),
    ])
    with T.no_grad():
        z_fused = teacher(x, s)[1].z_fused
    dcfg = DistillConfig(1.0, 0.5, "full")

    def student_loss_wrt(name):
        original = student.named_parameters()[name]

        def f(p):
            _set_param(student, name, p)
            try:
                pred, z_proj = student(x)
                total, _ = student_objective(pred, y, z_proj, z_fused, dcfg)
            finally:
                _set_param(student, name, original)
            return total

        return f, original.data.copy()

    for name in student.named_parameters():
        f, x0 = student_loss_wrt(name)
        out.append(("student_loss", f"full student objective wrt {name}", f, x0))
    return out


_BUILDERS = (_elementwise_checks, _structural_checks, _normalisation_checks, _attention_checks,
             _spectral_checks, _loss_checks)

REGISTERED = ("add", "sub", "mul", "scale", "abs", "square", "sqrt", "matmul", "reshape", "concat",
              "sum", "mean", "softmax", "layer_norm", "attention", "rfft_magnitude", "spectral_loss",
              "semantic_loss", "student_loss")


def run(op: str | None = None, tol: float = 1e-5, seed: int = 0, h: float = H) -> list:
    """Run the registered checks (optionally only those for ``op``) in 64-bit mode."""
    if op is not None and op not in REGISTERED:
        raise KeyError(op)
    results = []
    with T.using_float_width(64):
        rng = np.random.default_rng(seed)
        for build in _BUILDERS:
            for name, label, f, x in build(rng):
                if op is not None and name != op:
                    continue
                report = T.grad_check(f, x, h=h, tol=tol)
                results.append(CheckResult(name, label, report.max_rel_err, tol))
    return results
