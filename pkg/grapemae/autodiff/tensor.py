"""
Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a NumPy array. Operations are `Function` subclasses: each
records its input tensors, computes the forward value from raw arrays, and
maps the output gradient back to one gradient per input. The graph built by a
forward pass is single-use: `Tensor.backward` consumes it, and a second
backward over the same graph raises `UsageError`.

Broadcasting is limited to two cases: a 0-d scalar against anything, and a
shape that equals the trailing axes of the other operand (a bias of shape
(D,) against (B, N, D)). Everything else is a `ShapeError`.
"""
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ShapeError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph (evaluation, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Result shape of an elementwise op under the scalar / trailing-axis rule."""
    if a == b:
        return a
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if len(a) > len(b) and a[-len(b):] == b:
        return a
    if len(b) > len(a) and b[-len(a):] == a:
        return b
    raise ShapeError(f"cannot broadcast shapes {a} and {b} (only scalar and trailing-axis broadcasting)")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that broadcasting added."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement `forward` over NumPy arrays and `backward`, which
    receives dL/d(output) and returns one array (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors
        self.consumed = False

    def forward(self, *args: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Union["Tensor", ArrayLike], **kwargs) -> "Tensor":
        tensors = tuple(as_tensor(t) for t in inputs)
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """An n-dimensional float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100  # numpy scalars defer to Tensor operators

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name
        self.grad: Optional[np.ndarray] = None

    # ---- Introspection ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- Gradient bookkeeping ----
    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            grad = np.broadcast_to(grad, self.data.shape)
        self.grad = np.array(grad, dtype=np.float64) if self.grad is None else self.grad + grad

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate `.grad` on every tensor requiring grad that fed this scalar, then consume the graph."""
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if self.creator is not None and self.creator.consumed:
            raise UsageError("graph already consumed by a previous backward; run a new forward pass")
        if self.creator is None:
            if self.requires_grad:
                self._accumulate(np.ones_like(self.data))
            return

        order = self._topological_order()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            func = node.creator
            if func is None:
                if grad is not None:
                    node._accumulate(grad)
                elif node.grad is None:
                    # reachable but no gradient flowed here
                    node.grad = np.zeros_like(node.data)
                continue
            if grad is not None:
                for parent, parent_grad in zip(func.tensors, func.backward(grad)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + parent_grad if key in grads else parent_grad
            func.consumed = True

    # ---- Operators ----
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __pow__(self, exponent: float):
        return _ops.power(self, exponent)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops.transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return _ops.exp(self)

    def log(self) -> "Tensor":
        return _ops.log(self)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=False)


def parameter(data: ArrayLike, name: str = "") -> Tensor:
    """A leaf tensor that requires grad (a learnable parameter)."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


from . import ops as _ops  # noqa: E402  (ops needs Tensor/Function defined first)
