"""
Differentiable primitives.

Each primitive is a `Function` subclass; the lowercase helpers below are the
public surface (`matmul`, `softmax`, `layer_norm`, `gelu`, `cross_entropy`, ...).
"""
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from ..errors import LabelError, NumericInputError, ShapeError
from .tensor import Function, Tensor, as_tensor, broadcast_shape, unbroadcast

Axis = Optional[Union[int, Tuple[int, ...]]]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -----------------------------
# Elementwise arithmetic
# -----------------------------
class Add(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.tensors
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.tensors
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.tensors
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a / b

    def backward(self, grad):
        a, b = self.tensors
        ga = grad / b.data
        gb = -grad * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.exponent = exponent
        return a ** exponent

    def backward(self, grad):
        (a,) = self.tensors
        return (grad * self.exponent * a.data ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        (a,) = self.tensors
        return (grad / a.data,)


# -----------------------------
# Reductions and shape ops
# -----------------------------
def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


class Sum(Function):
    def forward(self, a, axis: Axis = None, keepdims: bool = False):
        self.axis, self.keepdims = axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        (a,) = self.tensors
        return (_expand_reduced(grad, a.shape, self.axis, self.keepdims),)


class Mean(Function):
    def forward(self, a, axis: Axis = None, keepdims: bool = False):
        self.axis, self.keepdims = axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size / max(np.size(out), 1)
        return out

    def backward(self, grad):
        (a,) = self.tensors
        return (_expand_reduced(grad, a.shape, self.axis, self.keepdims) / self.count,)


class Reshape(Function):
    def forward(self, a, shape: Tuple[int, ...]):
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e

    def backward(self, grad):
        (a,) = self.tensors
        return (grad.reshape(a.shape),)


class Transpose(Function):
    def forward(self, a, axes: Optional[Tuple[int, ...]] = None):
        self.axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Expand(Function):
    """Repeat a tensor along new leading axes."""

    def forward(self, a, shape: Tuple[int, ...]):
        shape = tuple(shape)
        if broadcast_shape(a.shape, shape) != shape:
            raise ShapeError(f"cannot expand {a.shape} to {shape}")
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        (a,) = self.tensors
        return (unbroadcast(grad, a.shape),)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise ShapeError(f"cannot concatenate shapes {[arr.shape for arr in arrays]} on axis {axis}") from e

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Take(Function):
    """Index the first axis with an integer array; result shape is idx.shape + a.shape[1:]."""

    def forward(self, a, index: np.ndarray):
        index = np.asarray(index, dtype=np.int64)
        self.index = int(index) if index.ndim == 0 else index
        return a[self.index]

    def backward(self, grad):
        (a,) = self.tensors
        out = np.zeros_like(a.data)
        np.add.at(out, self.index, grad)
        return (out,)


class TakeAlong(Function):
    """Per-row gather on axis 1: a[B, N, ...] with index[B, K] gives [B, K, ...]."""

    def forward(self, a, index: np.ndarray):
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 2 or index.shape[0] != a.shape[0]:
            raise ShapeError(f"gather index {index.shape} does not match batch of {a.shape}")
        self.rows = np.arange(a.shape[0])[:, None]
        self.index = index
        return a[self.rows, index]

    def backward(self, grad):
        (a,) = self.tensors
        out = np.zeros_like(a.data)
        np.add.at(out, (self.rows, self.index), grad)
        return (out,)


# -----------------------------
# Linear algebra
# -----------------------------
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        lead_a, lead_b = a.shape[:-2], b.shape[:-2]
        if lead_a and lead_b and lead_a != lead_b:
            raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.tensors
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


# -----------------------------
# Normalisation and activations
# -----------------------------
def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"{op} received non-finite input")


class Softmax(Function):
    def forward(self, a, axis: int = -1):
        _check_finite(a, "softmax")
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a, axis: int = -1):
        _check_finite(a, "log_softmax")
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=self.axis, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps: float = 1e-6):
        dim = x.shape[-1]
        if gamma.shape != (dim,) or beta.shape != (dim,):
            raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {dim}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, grad):
        x, gamma, _ = self.tensors
        dim = x.shape[-1]
        xhat = self.xhat
        lead = tuple(range(grad.ndim - 1))
        dgamma = (grad * xhat).sum(axis=lead)
        dbeta = grad.sum(axis=lead)
        dxhat = grad * gamma.data
        dx = (self.inv_std / dim) * (
            dim * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


class Gelu(Function):
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""

    def forward(self, a):
        self.cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
        return a * self.cdf

    def backward(self, grad):
        (a,) = self.tensors
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (grad * (self.cdf + a.data * pdf),)


# -----------------------------
# Functional surface
# -----------------------------
def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def power(a, exponent: float) -> Tensor:
    return Pow.apply(a, exponent=float(exponent))


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sum(a, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def expand(a, shape: Sequence[int]) -> Tensor:
    return Expand.apply(a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def take(a, index) -> Tensor:
    return Take.apply(a, index=np.asarray(index))


def take_along(a, index) -> Tensor:
    return TakeAlong.apply(a, index=np.asarray(index))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; dA = dC·Bᵀ, dB = Aᵀ·dC."""
    return MatMul.apply(a, b)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits)); targets are soft label rows."""
    logits = as_tensor(logits)
    target_data = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if target_data.shape != logits.shape or logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects matching B×C logits and targets, got {logits.shape} and {target_data.shape}")
    row_sums = target_data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise LabelError(f"target row {bad} sums to {row_sums[bad]:.8f}, expected 1")
    batch = logits.shape[0]
    return -(log_softmax(logits, axis=-1) * Tensor(target_data)).sum() / float(batch)
