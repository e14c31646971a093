"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations executed while recording is enabled append an adjoint closure
to a global tape; `backward` replays the tape in exact reverse execution
order, accumulating gradients additively into every reachable tensor that
requires them. Tensors are float32 throughout; gradient buffers match
their tensor's extents.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeError

_TAPE: list[Callable[[], None]] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def record(fn: Callable[[], None]) -> None:
    """Append an adjoint closure to the tape (no-op when recording is off)."""
    if _GRAD_ENABLED:
        _TAPE.append(fn)


def clear_tape() -> None:
    _TAPE.clear()


def tape_length() -> int:
    return len(_TAPE)


class Tensor:
    """Dense float32 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def bump_grad(self, g) -> None:
        """Accumulate `g` into this tensor's gradient buffer."""
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float32)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic (same extents, or scalar second operand) --

    def __add__(self, other):
        return _binary("add", self, other)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __mul__(self, other):
        return _binary("mul", self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def maximum(self, scalar: float) -> "Tensor":
        """Elementwise max with a scalar; `relu` is `maximum(0)`."""
        out = Tensor(np.maximum(self.data, np.float32(scalar)),
                     _GRAD_ENABLED and self.requires_grad)
        if out.requires_grad:
            x, s = self, float(scalar)

            def bwd():
                if out.grad is not None:
                    x.bump_grad(out.grad * (x.data > s))

            record(bwd)
        return out

    def relu(self) -> "Tensor":
        return self.maximum(0.0)

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), _GRAD_ENABLED and self.requires_grad)
        if out.requires_grad:
            x = self

            def bwd():
                if out.grad is not None:
                    x.bump_grad(np.full_like(x.data, out.grad[0]))

            record(bwd)
        return out

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _binary(op: str, a: Tensor, b) -> Tensor:
    scalar = isinstance(b, (int, float, np.floating, np.integer))
    if not scalar:
        if not isinstance(b, Tensor):
            raise TypeError(f"expected Tensor or scalar, got {type(b).__name__}")
        if a.data.shape != b.data.shape:
            raise ShapeError(f"extent mismatch for {op}: {a.data.shape} vs {b.data.shape}")
    bval = np.float32(b) if scalar else b.data
    if op == "add":
        out_data = a.data + bval
    elif op == "sub":
        out_data = a.data - bval
    elif op == "mul":
        out_data = a.data * bval
    else:
        raise ContractError(f"unknown elementwise op {op!r}")

    needs = _GRAD_ENABLED and (a.requires_grad or (not scalar and b.requires_grad))
    out = Tensor(out_data, needs)
    if out.requires_grad:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                if op == "mul":
                    a.bump_grad(g * bval)
                else:
                    a.bump_grad(g)
            if not scalar and b.requires_grad:
                if op == "mul":
                    b.bump_grad(g * a.data)
                elif op == "sub":
                    b.bump_grad(-g)
                else:
                    b.bump_grad(g)

        record(bwd)
    return out


class Parameter(Tensor):
    """Named trainable tensor with an SGD velocity buffer."""

    __slots__ = ("name", "velocity", "weight_decay")

    def __init__(self, name: str, data, weight_decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.velocity = np.zeros_like(self.data)
        self.weight_decay = weight_decay

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def backward(loss: Tensor) -> None:
    """Replay the tape in reverse, populating grads of all reachable tensors.

    `loss` must hold exactly one element. Gradients accumulate additively,
    so a tensor used twice receives the sum of both adjoint paths. The tape
    is consumed by the call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got extents {loss.data.shape}")
    try:
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(_TAPE):
            fn()
    finally:
        _TAPE.clear()


def finite_difference_check(f, x: Tensor, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a tensor to a scalar Tensor and must be deterministic across
    calls. The per-element step is `step * max(1, |x_i|)`; the relative
    error denominator is `max(1, |analytic|, |central|)`. Returns NaN if
    `f` produces NaN.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x.zero_grad()
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = float(flat[i])
        h = step * max(1.0, abs(orig))
        with no_grad():
            flat[i] = orig + h
            xp = float(flat[i])
            fp = f(x).item()
            flat[i] = orig - h
            xm = float(flat[i])
            fm = f(x).item()
        flat[i] = orig
        if math.isnan(fp) or math.isnan(fm):
            return float("nan")
        central = (fp - fm) / (xp - xm)
        a = float(aflat[i])
        err = abs(a - central) / max(1.0, abs(a), abs(central))
        worst = max(worst, err)
    return worst
