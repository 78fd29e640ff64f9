"""Dense tensor core with reverse-mode automatic differentiation.

A small Wengert-list engine over numpy arrays: every differentiable
operation appends an adjoint closure to a process-global tape, and
``backward`` replays the tape in reverse to populate ``.grad`` on every
reachable leaf. The op set is exactly what graph convolutions, attention
blocks, pooling and their reconstruction losses need; there is no
broadcasting magic beyond numpy's own rules.

Training runs in float32 by default; wrap verification code in
``precision("float64")`` when checking gradients against finite
differences.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "TapeError",
    "precision",
    "default_dtype",
    "no_grad",
    "backward",
    "tape_size",
    "matmul",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "weighted_sum",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "clamp_min",
    "softmax",
    "layer_norm",
    "transpose",
    "reshape",
    "concat",
    "take_slice",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
]


class ShapeError(ValueError):
    """Operand dimensions do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) entered or left an operation."""


class TapeError(RuntimeError):
    """Gradient-tape misuse: non-scalar loss, detached graph, or replay of a consumed tape."""


_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    """Current default float dtype for new tensors."""
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default dtype, e.g. ``precision("float64")``."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float array that can participate in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal: wrap an op result without re-casting its dtype.
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad and _grad_enabled
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    """Coerce arrays and scalars to a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------


class GradTape:
    """Ordered record of executed ops with the closures needed for adjoints."""

    def __init__(self):
        self.entries: list = []  # (out Tensor, adjoint fn)
        self.output_ids: set = set()

    def clear(self):
        self.entries.clear()
        self.output_ids.clear()


_tape = GradTape()


def tape_size() -> int:
    return len(_tape.entries)


def _record(out: Tensor, adjoint) -> None:
    if out.requires_grad:
        _tape.entries.append((out, adjoint))
        _tape.output_ids.add(id(out))


def _accum(t: Tensor, g: np.ndarray) -> None:
    _check_finite(g, "backward pass")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source tensor."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    The tape is consumed: a second call without new forward work raises
    TapeError rather than silently returning stale gradients.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if not _tape.entries:
        raise TapeError("gradient tape is empty (already consumed, or graph built under no_grad)")
    if id(loss) not in _tape.output_ids:
        raise TapeError("loss is not attached to the active tape (detached graph)")
    try:
        loss.grad = np.ones_like(loss.data)
        for out, adjoint in reversed(_tape.entries):
            if out.grad is not None:
                adjoint(out.grad)
    finally:
        _tape.clear()


# --------------------------------------------------------------------------
# Forward operations
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.data.shape} @ {b.data.shape}") from err
    _check_finite(out_data, "matmul")
    out = Tensor._wrap(out_data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _sum_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    _record(out, adjoint)
    return out


def _broadcast_check(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as err:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from err


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    out_data = a.data + b.data
    _check_finite(out_data, "add")
    out = Tensor._wrap(out_data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _sum_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(g, b.data.shape))

    _record(out, adjoint)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    out_data = a.data - b.data
    _check_finite(out_data, "sub")
    out = Tensor._wrap(out_data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _sum_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(-g, b.data.shape))

    _record(out, adjoint)
    return out


def neg(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._wrap(-x.data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, -g)

    _record(out, adjoint)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    out_data = a.data * b.data
    _check_finite(out_data, "mul")
    out = Tensor._wrap(out_data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _sum_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(g * a.data, b.data.shape))

    _record(out, adjoint)
    return out


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out_data = x.data * x.data.dtype.type(s)
    _check_finite(out_data, "scale")
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g * s)

    _record(out, adjoint)
    return out


def weighted_sum(a, b, wa: float, wb: float) -> Tensor:
    """``wa*a + wb*b`` with python-scalar weights; shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"weighted_sum: shapes {a.data.shape} and {b.data.shape} differ")
    wa, wb = float(wa), float(wb)
    out_data = a.data * a.data.dtype.type(wa) + b.data * b.data.dtype.type(wb)
    _check_finite(out_data, "weighted_sum")
    out = Tensor._wrap(out_data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, g * wa)
        if b.requires_grad:
            _accum(b, g * wb)

    _record(out, adjoint)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0)
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    _record(out, adjoint)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - out_data * out_data))

    _record(out, adjoint)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Split by sign so exp never overflows.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype, copy=False)
    _check_finite(out_data, "sigmoid")
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g * out_data * (1.0 - out_data))

    _record(out, adjoint)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value; clamp first")
    out_data = np.log(x.data)
    _check_finite(out_data, "log")
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    _record(out, adjoint)
    return out


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    lo = float(lo)
    out_data = np.maximum(x.data, lo)
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g * (x.data > lo))

    _record(out, adjoint)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)
    _check_finite(out_data, "softmax")
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            inner = np.sum(g * out_data, axis=axis, keepdims=True)
            _accum(x, (g - inner) * out_data)

    _record(out, adjoint)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by a learned affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match feature dim {d}"
        )
    mean = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mean) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out_data = xhat * gamma.data + beta.data
    _check_finite(out_data, "layer_norm")
    out = Tensor._wrap(out_data, x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def adjoint(g):
        if gamma.requires_grad:
            _accum(gamma, _sum_to(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accum(beta, _sum_to(g, beta.data.shape))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = np.mean(gx_hat, axis=-1, keepdims=True)
            m2 = np.mean(gx_hat * xhat, axis=-1, keepdims=True)
            _accum(x, (gx_hat - m1 - xhat * m2) * inv)

    _record(out, adjoint)
    return out


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.data.ndim < 2:
            raise ShapeError(f"transpose needs >=2-d input, got shape {x.data.shape}")
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    out = Tensor._wrap(np.transpose(x.data, axes), x.requires_grad)
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        if x.requires_grad:
            _accum(x, np.transpose(g, inverse))

    _record(out, adjoint)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}") from err
    out = Tensor._wrap(out_data, x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    _record(out, adjoint)
    return out


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat shapes do not align: {[p.data.shape for p in parts]}") from err
    out = Tensor._wrap(out_data, any(p.requires_grad for p in parts))
    axis_norm = axis if axis >= 0 else out_data.ndim + axis
    sizes = [p.data.shape[axis_norm] for p in parts]

    def adjoint(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis_norm] = slice(offset, offset + size)
                _accum(p, g[tuple(index)])
            offset += size

    _record(out, adjoint)
    return out


def take_slice(x, key) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, or tuples of them."""
    x = as_tensor(x)
    out_data = x.data[key]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)
    out = Tensor._wrap(out_data.copy(), x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] = g
            _accum(x, gx)

    _record(out, adjoint)
    return out


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    axis = int(axis)
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def reduce_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.data.ndim)
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = Tensor._wrap(np.asarray(out_data), x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape).copy())

    _record(out, adjoint)
    return out


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.data.ndim)
    count = x.data.size if axis is None else x.data.shape[axis]
    out_data = np.mean(x.data, axis=axis, keepdims=keepdims)
    out = Tensor._wrap(np.asarray(out_data), x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g / count, x.data.shape).copy())

    _record(out, adjoint)
    return out


def reduce_max(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if as_tensor(x).data.size == 0:
        raise ShapeError("reduce_max of an empty tensor")
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.data.ndim)
    out_data = np.max(x.data, axis=axis, keepdims=keepdims)
    max_keep = np.max(x.data, axis=axis, keepdims=True)
    out = Tensor._wrap(np.asarray(out_data), x.requires_grad)

    def adjoint(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            mask = (x.data == max_keep)
            counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
            # subgradient split evenly among tied maxima
            _accum(x, mask * (g / counts))

    _record(out, adjoint)
    return out
