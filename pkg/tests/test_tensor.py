"""Autograd core: elementwise ops, tape replay, finite-difference oracle."""

import numpy as np
import pytest

from bayeseg.errors import ContractError, ShapeError
from bayeseg.rng import Rng
from bayeseg.tensor import (Parameter, Tensor, backward, finite_difference_check,
                            no_grad, tape_length)


def test_add_elementwise():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_scalar_annihilates():
    out = Tensor([1.5, -2.0, 7.0]) * 0.0
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])


def test_max_with_scalar_is_relu_primitive():
    out = Tensor([-1.0, 2.0]).maximum(0.0)
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_extent_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])


def test_scalar_operand_broadcast():
    out = Tensor([1.0, 2.0]) * 3.0 + 1.0
    np.testing.assert_array_equal(out.data, [4.0, 7.0])


def test_backward_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward((w * w).sum())
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_constant_loss_zero_grad():
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward((w * 0.0).sum())
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_backward_requires_scalar_loss():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * w)


def test_gradient_accumulates_across_uses():
    # w appears in two terms: d/dw [sum(w*w) + sum(3*w)] = 2w + 3
    w = Tensor([1.0, -2.0], requires_grad=True)
    loss = (w * w).sum() + (w * 3.0).sum()
    backward(loss)
    np.testing.assert_allclose(w.grad, [2 * 1.0 + 3, 2 * -2.0 + 3])


def test_gradient_linearity():
    a, b = 2.5, -1.25
    base = np.array([0.5, -1.5, 2.0], np.float32)

    def grad_of(build):
        w = Tensor(base.copy(), requires_grad=True)
        backward(build(w))
        return w.grad.copy()

    g1 = grad_of(lambda w: (w * w).sum())
    g2 = grad_of(lambda w: (w * -2.0 + 1.0).sum())
    combined = grad_of(lambda w: (w * w).sum() * a + (w * -2.0 + 1.0).sum() * b)
    np.testing.assert_allclose(combined, a * g1 + b * g2, rtol=1e-5)


def test_no_grad_suppresses_recording():
    w = Tensor([1.0], requires_grad=True)
    with no_grad():
        out = w * w
    assert not out.requires_grad
    assert tape_length() == 0


def test_replay_bitwise_deterministic():
    def run():
        rng = Rng.stream(7, 0)
        w = Tensor(rng.normal((4, 4)), requires_grad=True)
        noise = Tensor(rng.normal((4, 4)))
        loss = ((w * noise).maximum(0.0) * (w * 0.5)).sum()
        backward(loss)
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_fd_check_quadratic():
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    err = finite_difference_check(lambda t: (t * t).sum(), x, 1e-2)
    assert err < 1e-4


def test_fd_check_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    err = finite_difference_check(lambda t: (t * 0.0).sum(), x, 1e-2)
    assert err == 0.0


def test_fd_check_three_layer_composite():
    # elementwise composite with a kink kept away from the probe radius
    rng = Rng.stream(11, 0)
    vals = ((0.2 + 0.8 * rng.uniform((3, 3))) *
            np.where(rng.uniform((3, 3)) < 0.5, -1.0, 1.0)).astype(np.float32)
    x = Tensor(vals, requires_grad=True)

    def f(t):
        layer1 = t * t + t * 0.5
        layer2 = layer1.maximum(0.05)
        return (layer2 * t).sum()

    assert finite_difference_check(f, x, 1e-2) < 1e-3


def test_fd_check_reports_nan():
    x = Tensor([1.0], requires_grad=True)

    def f(t):
        out = t * float("nan")
        return out.sum()

    assert np.isnan(finite_difference_check(f, x, 1e-2))


def test_parameter_has_velocity_and_grad_extents():
    p = Parameter("w", np.ones((2, 3), np.float32))
    assert p.velocity.shape == p.data.shape
    backward((p * p).sum())
    assert p.grad.shape == p.data.shape
