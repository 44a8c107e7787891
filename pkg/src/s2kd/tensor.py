"""Dense float tensors with tape-based reverse-mode differentiation.

Every operation that touches a ``requires_grad`` input appends a node to the
active :class:`Tape`. :func:`backward` replays the recorded rules in reverse
order starting from a scalar root. Leaves with ``requires_grad=False`` never
receive a gradient, which is how a frozen model is kept out of an update.

Float width is a process-wide run mode (:func:`set_float_width`): 32-bit for
training, 64-bit for gradient checks.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

SQRT_EPS = 1e-5
LN_EPS = 1e-5

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32


def set_float_width(bits: int) -> None:
    global _dtype
    if bits not in _DTYPES:
        raise ConfigurationError(f"float width must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype():
    return _dtype


def float_width() -> int:
    return 64 if _dtype is np.float64 else 32


@contextlib.contextmanager
def using_float_width(bits: int):
    previous = float_width()
    set_float_width(bits)
    try:
        yield
    finally:
        set_float_width(previous)


class Node:
    __slots__ = ("inputs", "output", "backward", "index", "tape", "name")

    def __init__(self, inputs, output, backward, index, tape, name):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.index = index
        self.tape = tape
        self.name = name


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, output: "Tensor", inputs: tuple, backward: Callable, name: str) -> None:
        node = Node(inputs, output, backward, len(self.nodes), self, name)
        output._node = node
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t: "Tensor") -> bool:
        node = t._node
        return (
            node is not None
            and node.tape is self
            and node.index < len(self.nodes)
            and self.nodes[node.index] is node
        )


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def active_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def recording(tape: Tape | None = None):
    """Route recorded operations to a fresh (or given) tape for the block."""
    previous = _state.tape
    _state.tape = Tape() if tape is None else tape
    try:
        yield _state.tape
    finally:
        _state.tape = previous


@contextlib.contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: tuple, backward: Callable, name: str) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.record(out, inputs, backward, name)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def sqrt_eps(a, eps: float = None) -> Tensor:
    """``sqrt(a + eps)``; the offset keeps the derivative finite at zero."""
    a = as_tensor(a)
    eps = SQRT_EPS if eps is None else eps
    out = np.sqrt(a.data + eps)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt_eps")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "abs": abs,
    "square": square,
    "sqrt": sqrt_eps,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("abs", "square", "sqrt"):
        return fn(a)
    if b is None:
        raise ContractError(f"{kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalisation


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} is out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = None) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ConfigurationError(f"layer_norm needs a feature width >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    eps = LN_EPS if eps is None else eps
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gd = gain.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    node = root._node
    if node is None or root not in node.tape:
        raise ContractError("backward root was not produced on an active tape")
    grads = {id(root): np.ones_like(root.data)}
    nodes = node.tape.nodes
    for i in range(node.index, -1, -1):
        current = nodes[i]
        g = grads.pop(id(current.output), None)
        if g is None:
            continue
        for inp, gi in zip(current.inputs, current.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None or inp._node.tape is not node.tape:
                gi = np.array(gi, dtype=inp.data.dtype)
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray = field(repr=False)
    max_rel_err: float
    tol: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Coordinate-wise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6, tol: float = 1e-6,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Must run in 64-bit mode; finite differences are meaningless in float32.
    """
    if float_width() != 64:
        raise ContractError("grad_check requires 64-bit float mode")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)

    with recording():
        xt = Tensor(x0.copy(), requires_grad=True)
        out = f(xt)
        if out.size != 1:
            raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    with no_grad():
        for i in range(pflat.size):
            orig = pflat[i]
            pflat[i] = orig + h
            up = f(Tensor(probe)).item()
            pflat[i] = orig - h
            down = f(Tensor(probe)).item()
            pflat[i] = orig
            flat[i] = (up - down) / (2.0 * h)

    rel = relative_error(analytic, numeric, floor)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(analytic, numeric, rel, worst, tol, worst <= tol)
