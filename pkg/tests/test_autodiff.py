import math

import numpy as np
import pytest

from grapemae.autodiff import (
    Function,
    Tensor,
    concat,
    cross_entropy,
    expand,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    no_grad,
    softmax,
    take,
    take_along,
)
from grapemae.autodiff.tensor import is_grad_enabled
from grapemae.errors import LabelError, NumericInputError, ShapeError, UsageError


# ---- forward values ----
def test_matmul_values():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(eye, b).data, b.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_of_sum():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, [[2.0, 2.0], [2.0, 2.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_values():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(softmax(Tensor([math.log(1.0), math.log(3.0)])).data, [0.25, 0.75])


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericInputError):
        softmax(Tensor([np.nan, 1.0]))


def test_layer_norm_values():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(Tensor([4.0, 4.0]), ones, zeros).data, [0.0, 0.0])
    np.testing.assert_allclose(layer_norm(Tensor([1.0, 3.0]), ones, zeros).data, [-1.0, 1.0], atol=1e-5)
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.zeros(2)), Tensor([5.0, 5.0]))
    np.testing.assert_allclose(out.data, [5.0, 5.0])


def test_gelu_values():
    assert gelu(Tensor(0.0)).item() == 0.0
    assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    assert abs(gelu(Tensor(1.0)).item() - 0.841345) < 1e-6


def test_cross_entropy_values():
    assert abs(cross_entropy(Tensor([[0.0, 0.0]]), Tensor([[0.5, 0.5]])).item() - math.log(2.0)) < 1e-12
    assert cross_entropy(Tensor([[1e3, -1e3]]), Tensor([[1.0, 0.0]])).item() < 1e-12
    assert abs(cross_entropy(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0]])).item() - 1.313262) < 1e-6


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(LabelError):
        cross_entropy(Tensor([[0.0, 0.0]]), Tensor([[0.5, 0.6]]))


# ---- backward contract ----
def test_backward_quadratic():
    w = Tensor([1.0, 2.0], requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


class _Sign(Function):
    def forward(self, x):
        return np.sign(x)

    def backward(self, grad):
        return (None,)


class _SquareMissingFactor(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (grad * self.x,)


def test_backward_constant_loss_leaves_zero_grads():
    w = Tensor([1.0, -2.0], requires_grad=True)
    _Sign.apply(w).sum().backward()
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        (w * 2.0).backward()


def test_second_backward_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert y.creator is None and not y.requires_grad
    z = (x * 2.0).detach()
    assert z.creator is None and not z.requires_grad


def test_broadcast_rejects_non_suffix_shapes():
    with pytest.raises(ShapeError):
        Tensor(np.ones((3, 1))) + Tensor(np.ones((3,)))


# ---- finite differences ----
@pytest.mark.parametrize(
    "fn",
    [
        lambda x: (x * x * 3.0 - x / 2.0).sum(),
        lambda x: (x.exp() + (x * x + 1.0).log()).sum(),
        lambda x: (softmax(x, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
        lambda x: (gelu(x) ** 2).mean(),
        lambda x: (layer_norm(x, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.ones(4))) ** 2).sum(),
        lambda x: matmul(x, x.transpose(1, 0)).sum(),
        lambda x: (x.reshape(4, 3).transpose(1, 0) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
        lambda x: (concat([x, x * 2.0], axis=0) ** 2).sum(),
        lambda x: (take(x, np.array([2, 0])) ** 2).sum(),
        lambda x: (expand(x.sum(axis=0), (2, 4)) ** 2).sum(),
        lambda x: cross_entropy(x, Tensor(np.full((3, 4), 0.25))),
    ],
)
def test_primitives_pass_gradient_check(fn):
    x = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
    report = grad_check(fn, x)
    assert report.passed, report.max_rel_error


def test_take_along_gradient_check():
    idx = np.array([[2, 0], [1, 3]])
    x = Tensor(np.random.default_rng(5).normal(size=(2, 4, 3)))
    report = grad_check(lambda t: (take_along(t, idx) ** 2).sum(), x)
    assert report.passed, report.max_rel_error


def test_gradient_check_catches_a_wrong_backward():
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    report = grad_check(lambda t: _SquareMissingFactor.apply(t).sum(), x)
    assert not report.passed
    assert report.max_rel_error > 1e-1
