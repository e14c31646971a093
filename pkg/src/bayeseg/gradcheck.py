"""Finite-difference verification of every layer's adjoint rule.

Each check compares analytic gradients against central differences on
small randomized tensors. Inputs feeding max-based layers are drawn with
guaranteed value separation so the +/-h probes cannot flip an argmax, and
ReLU inputs keep a margin away from the kink.
"""

from __future__ import annotations

import numpy as np

from . import layers
from .layers import (BatchNormState, ConvSpec, conv2d, dropout_apply,
                     maxpool2x2_with_indices, maxunpool2x2, softmax_per_pixel,
                     weighted_cross_entropy)
from .rng import Rng
from .tensor import Parameter, Tensor, finite_difference_check

TOLERANCE = 1e-3
STEP = 1e-2

LAYER_NAMES = ("conv", "batchnorm", "relu", "pool_unpool", "dropout", "softmax_xent")


def _mean_square(t: Tensor) -> Tensor:
    return (t * t).sum() * (1.0 / t.size)


def _margin_values(rng: Rng, shape) -> np.ndarray:
    """Values with |x| >= 0.1, keeping finite-difference probes off the ReLU kink."""
    u = rng.uniform(shape)
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return ((0.1 + 0.9 * u) * sign).astype(np.float32)


def _separated_values(rng: Rng, shape) -> np.ndarray:
    """Distinct values with pairwise gaps of 0.13, stable under +/-h probes."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float32) * 0.13
    return (vals - vals.mean()).reshape(shape)


def _check_conv(rng: Rng) -> float:
    x = Tensor(rng.normal((2, 5, 5)), requires_grad=True)
    std = np.sqrt(2.0 / 18)
    spec = ConvSpec(2, 3, Parameter("w", rng.normal((3, 2, 3, 3), std)),
                    Parameter("b", rng.normal(3, 0.1)))
    f = lambda _: _mean_square(conv2d(spec, x))
    return max(finite_difference_check(f, x, STEP),
               finite_difference_check(f, spec.weight, STEP),
               finite_difference_check(f, spec.bias, STEP))


def _check_batchnorm(rng: Rng) -> float:
    x = Tensor(rng.normal((2, 3, 4, 4)), requires_grad=True)
    bn = BatchNormState(
        gamma=Parameter("gamma", 1.0 + rng.normal(3, 0.2)),
        beta=Parameter("beta", rng.normal(3, 0.2)),
        running_mean=np.zeros(3, np.float32),
        running_var=np.ones(3, np.float32),
    )
    f = lambda _: _mean_square(layers.batchnorm(bn, x, "train"))
    return max(finite_difference_check(f, x, STEP),
               finite_difference_check(f, bn.gamma, STEP),
               finite_difference_check(f, bn.beta, STEP))


def _check_relu(rng: Rng) -> float:
    x = Tensor(_margin_values(rng, (3, 4, 4)), requires_grad=True)
    return finite_difference_check(lambda t: _mean_square(t.relu()), x, STEP)


def _check_pool_unpool(rng: Rng) -> float:
    x = Tensor(_separated_values(rng, (2, 4, 4)), requires_grad=True)

    def f(t):
        pooled, idx = maxpool2x2_with_indices(t)
        return _mean_square(maxunpool2x2(pooled, idx))

    return finite_difference_check(f, x, STEP)


def _check_dropout(rng: Rng, seed_key) -> float:
    x = Tensor(rng.normal((3, 4, 4)), requires_grad=True)
    # identical stream per evaluation freezes the mask across FD probes
    f = lambda t: _mean_square(dropout_apply(t, 0.5, "train", Rng.stream(*seed_key)))
    return finite_difference_check(f, x, STEP)


def _check_softmax_xent(rng: Rng) -> float:
    logits = Tensor(rng.normal((3, 4, 4)), requires_grad=True)
    labels = np.array(rng.uniform((4, 4)) * 3, np.int64)
    labels[0, 0] = 255  # one void pixel must carry zero gradient
    weights = (0.5 + rng.uniform(3)).astype(np.float32)
    f = lambda t: weighted_cross_entropy(softmax_per_pixel(t), labels, weights)
    return finite_difference_check(f, logits, STEP)


def run_suite(base_seed: int = 0, seeds: int = 20, inject_fault: bool = False):
    """Max relative FD error per layer type over `seeds` random draws."""
    worst = {name: 0.0 for name in LAYER_NAMES}
    if inject_fault:
        layers._FAULT = "conv"
    try:
        for k in range(seeds):
            worst["conv"] = max(worst["conv"], _check_conv(Rng.stream(base_seed, 0, k)))
            worst["batchnorm"] = max(worst["batchnorm"],
                                     _check_batchnorm(Rng.stream(base_seed, 1, k)))
            worst["relu"] = max(worst["relu"], _check_relu(Rng.stream(base_seed, 2, k)))
            worst["pool_unpool"] = max(worst["pool_unpool"],
                                       _check_pool_unpool(Rng.stream(base_seed, 3, k)))
            worst["dropout"] = max(worst["dropout"],
                                   _check_dropout(Rng.stream(base_seed, 4, k),
                                                  (base_seed, 4, k, 1)))
            worst["softmax_xent"] = max(worst["softmax_xent"],
                                        _check_softmax_xent(Rng.stream(base_seed, 5, k)))
    finally:
        layers._FAULT = None
    return worst
