"""Encoder-decoder segmentation model with configurable dropout placement.

The network has S encoder units (conv+BN+ReLU then 2x2 max-pool recording
indices), S mirrored decoder units (index-based unpool then conv+BN+ReLU)
and a final 3x3 classifier convolution. Decoder unit s reuses the pooling
indices of encoder unit S+1-s, so upsampling restores values to the exact
positions that won the corresponding max-pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .layers import (BatchNormState, ConvSpec, batchnorm, conv2d, dropout_apply,
                     maxpool2x2_with_indices, maxunpool2x2)
from .rng import Rng
from .tensor import Parameter, Tensor, no_grad

DROPOUT_VARIANTS = ("none", "encoder", "decoder", "enc_dec",
                    "central_enc_dec", "center", "classifier")

FORWARD_MODES = ("train", "mc_sample", "weight_avg")


@dataclass
class ModelConfig:
    input_channels: int = 3
    num_classes: int = 4
    stages: int = 4
    features: int = 64
    dropout_variant: str = "central_enc_dec"
    dropout_p: float = 0.5
    seed: int = 0

    def validate(self):
        if self.input_channels < 1:
            raise ContractError("input_channels must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.stages < 1:
            raise ContractError("stages must be >= 1")
        if self.features < 1:
            raise ContractError("features must be >= 1")
        if self.dropout_variant not in DROPOUT_VARIANTS:
            raise ContractError(f"unknown dropout variant {self.dropout_variant!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must be in [0,1)")


def dropout_sites(config: ModelConfig) -> list[str]:
    """Ordered dropout site identifiers for the configured variant.

    Site "enc{i}" sits after encoder unit i (post pooling); "dec{i}" after
    decoder unit i (post conv+BN+ReLU). The central variant covers the
    deepest half of each side: the last ceil(S/2) encoder units and the
    first (deepest) ceil(S/2) decoder units.
    """
    config.validate()
    s = config.stages
    variant = config.dropout_variant
    enc = [f"enc{i}" for i in range(1, s + 1)]
    dec = [f"dec{i}" for i in range(1, s + 1)]
    if variant == "none":
        return []
    if variant == "encoder":
        return enc
    if variant == "decoder":
        return dec
    if variant == "enc_dec":
        return enc + dec
    if variant == "center":
        return [f"enc{s}"]
    if variant == "classifier":
        return [f"dec{s}"]
    half = math.ceil(s / 2)
    return enc[s - half:] + dec[:half]


class SegModel:
    """Instantiated network: parameters, BN states and dropout site set."""

    def __init__(self, config: ModelConfig, enc_convs, enc_bns, dec_convs, dec_bns, classifier):
        self.config = config
        self.enc_convs = enc_convs
        self.enc_bns = enc_bns
        self.dec_convs = dec_convs
        self.dec_bns = dec_bns
        self.classifier = classifier
        self.sites = frozenset(dropout_sites(config))

    def parameters(self) -> list[Parameter]:
        """All trainable parameters in fixed construction order."""
        params = []
        for conv, bn in zip(self.enc_convs, self.enc_bns):
            params += [conv.weight, conv.bias, bn.gamma, bn.beta]
        for conv, bn in zip(self.dec_convs, self.dec_bns):
            params += [conv.weight, conv.bias, bn.gamma, bn.beta]
        params += [self.classifier.weight, self.classifier.bias]
        return params

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        named = [(f"enc{i + 1}.bn", bn) for i, bn in enumerate(self.enc_bns)]
        named += [(f"dec{i + 1}.bn", bn) for i, bn in enumerate(self.dec_bns)]
        return named


def _make_conv(name: str, cin: int, cout: int, rng: Rng) -> ConvSpec:
    std = math.sqrt(2.0 / (cin * 9))
    weight = Parameter(f"{name}.weight", rng.normal((cout, cin, 3, 3), std))
    bias = Parameter(f"{name}.bias", np.zeros(cout, np.float32), weight_decay=False)
    return ConvSpec(cin, cout, weight, bias)


def _make_bn(name: str, channels: int) -> BatchNormState:
    return BatchNormState(
        gamma=Parameter(f"{name}.gamma", np.ones(channels, np.float32)),
        beta=Parameter(f"{name}.beta", np.zeros(channels, np.float32)),
        running_mean=np.zeros(channels, np.float32),
        running_var=np.ones(channels, np.float32),
    )


def build_model(config: ModelConfig, rng: Rng) -> SegModel:
    """Instantiate and initialize the network; deterministic for a given rng.

    Conv weights are zero-mean Gaussian with std sqrt(2/fan_in); biases and
    beta start at zero, gamma at one.
    """
    config.validate()
    f = config.features
    enc_convs, enc_bns, dec_convs, dec_bns = [], [], [], []
    cin = config.input_channels
    for i in range(1, config.stages + 1):
        enc_convs.append(_make_conv(f"enc{i}.conv", cin, f, rng))
        enc_bns.append(_make_bn(f"enc{i}.bn", f))
        cin = f
    for i in range(1, config.stages + 1):
        dec_convs.append(_make_conv(f"dec{i}.conv", f, f, rng))
        dec_bns.append(_make_bn(f"dec{i}.bn", f))
    classifier = _make_conv("classifier.conv", f, config.num_classes, rng)
    return SegModel(config, enc_convs, enc_bns, dec_convs, dec_bns, classifier)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    f = config.features
    conv = lambda cin, cout: cout * cin * 9 + cout
    total = conv(config.input_channels, f) + (config.stages - 1) * conv(f, f)
    total += config.stages * conv(f, f)
    total += 2 * f * 2 * config.stages  # gamma+beta per encoder/decoder BN
    total += conv(f, config.num_classes)
    return total


def forward(model: SegModel, x, mode: str, rng: Rng | None = None) -> Tensor:
    """Mode-aware forward pass producing per-pixel class logits.

    train: batch-statistic BN, fresh dropout masks, graph recorded.
    mc_sample: running-statistic BN, fresh dropout masks, no graph.
    weight_avg: running-statistic BN, dropout is the identity, no graph.
    The internal mode "collect" normalizes by batch statistics while
    accumulating BN input moments (see train.finalize_batchnorm); dropout
    samples when an rng is supplied so the collected statistics match the
    distribution stochastic passes will see.
    """
    internal_collect = mode == "collect"
    if mode not in FORWARD_MODES and not internal_collect:
        raise ContractError(f"unknown forward mode {mode!r}")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg = model.config
    spatial = x.data.shape[-2:]
    c_in = x.data.shape[-3]
    if c_in != cfg.input_channels:
        raise ShapeError(f"expected {cfg.input_channels} input channels, got {c_in}")
    div = 2 ** cfg.stages
    if spatial[0] % div or spatial[1] % div:
        raise ShapeError(
            f"spatial extents {spatial[0]}x{spatial[1]} not divisible by 2^{cfg.stages}")

    if mode == "train":
        return _forward_impl(model, x, mode, rng)
    with no_grad():
        return _forward_impl(model, x, mode, rng)


def _forward_impl(model: SegModel, x: Tensor, mode: str, rng: Rng | None) -> Tensor:
    cfg = model.config
    bn_mode = "train" if mode == "train" else ("collect" if mode == "collect" else "eval")
    if mode in ("train", "mc_sample"):
        drop_mode = mode
    elif mode == "collect" and rng is not None:
        drop_mode = "mc_sample"
    else:
        drop_mode = "weight_avg"
    p = cfg.dropout_p

    h = x
    index_stack = []
    for i in range(cfg.stages):
        h = conv2d(model.enc_convs[i], h)
        h = batchnorm(model.enc_bns[i], h, bn_mode)
        h = h.relu()
        h, idx = maxpool2x2_with_indices(h)
        index_stack.append(idx)
        if f"enc{i + 1}" in model.sites:
            h = dropout_apply(h, p, drop_mode, rng)
    for i in range(cfg.stages):
        h = maxunpool2x2(h, index_stack[cfg.stages - 1 - i])
        h = conv2d(model.dec_convs[i], h)
        h = batchnorm(model.dec_bns[i], h, bn_mode)
        h = h.relu()
        if f"dec{i + 1}" in model.sites:
            h = dropout_apply(h, p, drop_mode, rng)
    return conv2d(model.classifier, h)
