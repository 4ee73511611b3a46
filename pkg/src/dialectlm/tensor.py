"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation executed while a Tape is active appends an
OpRecord (inputs, output, backward rule) to that tape; backward() replays
the tape in reverse, which is a valid topological order by construction.
Storage is float32 by default; pass float64 arrays for high-precision
gradient checking.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_COEFF = 0.044715


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense row-major array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req})"

    # arithmetic sugar; the registered ops below do the real work
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class OpRecord:
    """One executed operation: what went in, what came out, how to go back."""

    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: tuple, output: Tensor,
                 backward: Callable[[np.ndarray], None]):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_TAPES = _TapeStack()


class Tape:
    """Ordered record of executed operations; one tape per forward pass."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Optional[Tape]:
    return _TAPES.stack[-1] if _TAPES.stack else None


def _record(name: str, inputs: tuple, output: Tensor,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(
            isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        output._tape = tape
        tape.records.append(OpRecord(name, inputs, output, backward))
    return output


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate grad for every requires_grad tensor reachable from loss."""
    if loss.shape != ():
        raise ShapeError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.records:
        raise TapeError("backward called on a tensor with no recorded tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        rec.backward(g)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record("add", (a, b), out, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", (a, b), out, back)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _record("reshape", (x,), out, back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def back(g):
        _accumulate(x, np.transpose(g, inverse))

    return _record("transpose", (x,), out, back)


def index_select(x: Tensor, axis: int, index: int) -> Tensor:
    """Take a single slice along axis, dropping that axis."""
    out = Tensor(np.take(x.data, index, axis=axis))

    def back(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        _accumulate(x, gx)

    return _record("index_select", (x,), out, back)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for a in sorted(a % x.data.ndim for a in axes):
                g = np.expand_dims(g, axis=a)
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _record("sum", (x,), out, back)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = tensor_sum(x, axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.size // total.data.size
    return mul(total, Tensor(np.asarray(1.0 / count, dtype=x.dtype)))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {weight.shape[0]})")
    out = Tensor(weight.data[ids])

    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        _accumulate(weight, gw)

    return _record("embedding", (weight,), out, back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            train: bool) -> Tensor:
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(
        1.0 - rate, dtype=x.dtype)
    out = Tensor(x.data * keep)

    def back(g):
        _accumulate(x, g * keep)

    return _record("dropout", (x,), out, back)


# ---------------------------------------------------------------------------
# core neural-net ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out_data = a.data @ b.data
    except ValueError as err:
        raise ShapeError(
            f"matmul shape mismatch: {a.shape} x {b.shape}") from err
    out = Tensor(out_data)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _record("matmul", (a, b), out, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(
            f"softmax axis {axis} invalid for rank {x.data.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def back(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * y)

    return _record("softmax", (x,), out, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-12) -> Tensor:
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"layer_norm gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match last extent {h}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    norm = (x.data - mu) * inv
    out = Tensor(norm * gamma.data + beta.data)

    def back(g):
        _accumulate(beta, g.reshape(-1, h).sum(axis=0))
        _accumulate(gamma, (g * norm).reshape(-1, h).sum(axis=0))
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - norm * (gh * norm).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)

    return _record("layer_norm", (x, gamma, beta), out, back)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    c = np.asarray(_SQRT_2_OVER_PI, dtype=x.dtype)
    a = np.asarray(_GELU_COEFF, dtype=x.dtype)
    u = c * (x.data + a * x.data ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def back(g):
        du = c * (1.0 + 3.0 * a * x.data ** 2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _record("gelu", (x,), out, back)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax probability over non-ignored targets."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits "
            f"{logits.shape}")
    num_classes = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, num_classes)
    flat_targets = targets.reshape(-1)
    active = flat_targets != ignore_index
    active_targets = flat_targets[active]
    if active_targets.size and (active_targets.min() < 0
                                or active_targets.max() >= num_classes):
        raise ValueError(
            f"target out of range [0, {num_classes}): "
            f"{int(active_targets.min() if active_targets.min() < 0 else active_targets.max())}")
    count = int(active.sum())

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z

    if count == 0:
        loss_val = np.asarray(0.0, dtype=logits.dtype)
    else:
        rows = np.nonzero(active)[0]
        picked = log_probs[rows, active_targets]
        loss_val = np.asarray(-picked.mean(), dtype=logits.dtype)
    out = Tensor(loss_val)

    def back(g):
        gl = np.zeros_like(flat_logits)
        if count:
            rows = np.nonzero(active)[0]
            probs = np.exp(log_probs[rows])
            probs[np.arange(rows.size), active_targets] -= 1.0
            gl[rows] = probs * (g / count)
        _accumulate(logits, gl.reshape(logits.shape))

    return _record("cross_entropy", (logits,), out, back)
