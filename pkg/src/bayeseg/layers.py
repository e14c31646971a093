"""Network building blocks with forward and adjoint rules.

All spatial operators accept a single image [C,H,W] or a batch [N,C,H,W]
and return a tensor of matching rank. Convolutions are fixed at 3x3,
stride 1, zero padding 1 ("same"); pooling is non-overlapping 2x2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .rng import Rng
from .tensor import Parameter, Tensor, grad_enabled, record

LOG_CLAMP = 1e-12

# Fault-injection hook for gradcheck failure-path testing; never set in
# normal operation.
_FAULT: str | None = None


def _as_batch(x: Tensor):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got extents {x.data.shape}")


@dataclass
class ConvSpec:
    """3x3 same-padding convolution parameters."""

    in_channels: int
    out_channels: int
    weight: Parameter  # [out, in, 3, 3]
    bias: Parameter    # [out]


@dataclass
class BatchNormState:
    """Per-channel affine normalization with tracked running statistics."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    _collect: dict | None = field(default=None, repr=False)

    def begin_collect(self):
        c = self.gamma.data.shape[0]
        self._collect = {
            "sum": np.zeros(c, np.float64),
            "sumsq": np.zeros(c, np.float64),
            "count": 0,
        }

    def finish_collect(self):
        acc = self._collect
        if acc is None or acc["count"] == 0:
            raise ContractError("finish_collect before any collected batch")
        mean = acc["sum"] / acc["count"]
        var = np.maximum(acc["sumsq"] / acc["count"] - mean * mean, 0.0)
        self.running_mean = mean.astype(np.float32)
        self.running_var = var.astype(np.float32)
        self._collect = None


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Gather 3x3 neighborhoods of padded input into [N, C*9, H*W]."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 3, 3, h, w), np.float32)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + h, kj:kj + w]
    return cols.reshape(n, c * 9, h * w)


def conv2d(spec: ConvSpec, x: Tensor) -> Tensor:
    """Cross-correlation with zero padding 1 and stride 1, plus bias."""
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {c}")
    weight, bias = spec.weight, spec.bias
    o = spec.out_channels

    xp = np.zeros((n, c, h + 2, w + 2), np.float32)
    xp[:, :, 1:h + 1, 1:w + 1] = xb
    cols = _im2col(xp, h, w)
    w2 = weight.data.reshape(o, c * 9)
    out_data = np.matmul(w2, cols).reshape(n, o, h, w)
    out_data += bias.data[None, :, None, None]

    needs = grad_enabled() and (x.requires_grad or weight.requires_grad or bias.requires_grad)
    if not needs:
        cols = None  # free the gathered neighborhoods eagerly
    out = Tensor(out_data[0] if squeeze else out_data, needs)
    if needs:
        def bwd():
            g = out.grad
            if g is None:
                return
            gb = g.reshape(n, o, h * w)
            if bias.requires_grad:
                bias.bump_grad(gb.sum(axis=(0, 2)))
            if weight.requires_grad:
                dw2 = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0)
                weight.bump_grad(dw2.reshape(weight.data.shape))
            if x.requires_grad:
                dcols = np.matmul(w2.T, gb).reshape(n, c, 3, 3, h, w)
                if _FAULT == "conv":
                    dcols = dcols * 1.01
                dxp = np.zeros_like(xp)
                for ki in range(3):
                    for kj in range(3):
                        dxp[:, :, ki:ki + h, kj:kj + w] += dcols[:, :, ki, kj]
                dx = dxp[:, :, 1:h + 1, 1:w + 1]
                x.bump_grad(dx[0] if squeeze else dx)

        record(bwd)
    return out


def _to_windows(a: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N,C,H/2,W/2,4]; window offsets are row-major."""
    n, c, h, w = a.shape
    return (a.reshape(n, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, h // 2, w // 2, 4))


def _from_windows(win: np.ndarray) -> np.ndarray:
    n, c, h2, w2, _ = win.shape
    return (win.reshape(n, c, h2, w2, 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2 * 2, w2 * 2))


def maxpool2x2_with_indices(x: Tensor):
    """Non-overlapping 2x2 max pooling.

    Returns the pooled tensor and an integer index map storing, per output
    cell, the row-major offset (0..3) of the selected element within its
    window. Ties select the lowest offset.
    """
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pooling requires even spatial extents, got {h}x{w}")
    win = _to_windows(xb)
    idx = win.argmax(axis=-1)
    vals = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    needs = grad_enabled() and x.requires_grad
    out = Tensor(vals[0] if squeeze else vals, needs)
    if needs:
        def bwd():
            g = out.grad
            if g is None:
                return
            gb = g.reshape(n, c, h // 2, w // 2)
            gwin = np.zeros((n, c, h // 2, w // 2, 4), np.float32)
            np.put_along_axis(gwin, idx[..., None], gb[..., None], axis=-1)
            dx = _from_windows(gwin)
            x.bump_grad(dx[0] if squeeze else dx)

        record(bwd)
    return out, (idx[0] if squeeze else idx)


def maxunpool2x2(y: Tensor, indices: np.ndarray) -> Tensor:
    """Place each value at its recorded window offset; zeros elsewhere."""
    yb, squeeze = _as_batch(y)
    idxb = indices[None] if squeeze and indices.ndim == 3 else indices
    if idxb.shape != yb.shape:
        raise ShapeError(f"index extents {idxb.shape} do not match input {yb.shape}")
    n, c, h2, w2 = yb.shape
    owin = np.zeros((n, c, h2, w2, 4), np.float32)
    np.put_along_axis(owin, idxb[..., None], yb[..., None], axis=-1)
    out_data = _from_windows(owin)

    needs = grad_enabled() and y.requires_grad
    out = Tensor(out_data[0] if squeeze else out_data, needs)
    if needs:
        def bwd():
            g = out.grad
            if g is None:
                return
            gwin = _to_windows(g.reshape(n, c, h2 * 2, w2 * 2))
            dy = np.take_along_axis(gwin, idxb[..., None], axis=-1)[..., 0]
            y.bump_grad(dy[0] if squeeze else dy)

        record(bwd)
    return out


def dropout_apply(x: Tensor, p: float, mode: str, rng: Rng | None) -> Tensor:
    """Bernoulli dropout with inverted scaling.

    train / mc_sample: each activation is zeroed with probability p, kept
    activations are scaled by 1/(1-p). weight_avg: identity.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0,1), got {p}")
    if mode not in ("train", "mc_sample", "weight_avg"):
        raise ContractError(f"unknown dropout mode {mode!r}")
    if mode == "weight_avg" or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in stochastic mode requires an rng")
    keep = 1.0 - p
    mask = (rng.uniform(x.data.shape) >= p).astype(np.float32) * np.float32(1.0 / keep)
    needs = grad_enabled() and x.requires_grad
    out = Tensor(x.data * mask, needs)
    if needs:
        def bwd():
            if out.grad is not None:
                x.bump_grad(out.grad * mask)

        record(bwd)
    return out


def batchnorm(state: BatchNormState, x: Tensor, mode: str) -> Tensor:
    """Channel normalization.

    train: normalize by batch statistics over (N,H,W) and update running
    statistics with the configured momentum. eval: normalize by running
    statistics, never mutating them. collect: like train but accumulates
    exact input moments into the state's collector instead of updating the
    running statistics (used for post-training finalization).
    """
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if c != state.gamma.data.shape[0]:
        raise ShapeError(f"batchnorm expects {state.gamma.data.shape[0]} channels, got {c}")
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3)
    batch_stats = mode in ("train", "collect")
    if batch_stats:
        mu = xb.mean(axis=axes)
        var = xb.var(axis=axes)
        if mode == "train":
            m = np.float32(state.momentum)
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
            state.running_var = ((1 - m) * state.running_var + m * var).astype(np.float32)
        else:
            acc = state._collect
            if acc is None:
                raise ContractError("collect mode requires begin_collect()")
            x64 = xb.astype(np.float64)
            acc["sum"] += x64.sum(axis=axes)
            acc["sumsq"] += (x64 * x64).sum(axis=axes)
            acc["count"] += n * h * w
    elif mode == "eval":
        mu = state.running_mean
        var = state.running_var
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")

    inv = (1.0 / np.sqrt(var + state.epsilon)).astype(np.float32)
    # single fused affine pass: out = x*scale + shift
    scale = (gamma.data * inv).astype(np.float32)
    shift = (beta.data - mu * scale).astype(np.float32)
    out_data = xb * scale[None, :, None, None]
    out_data += shift[None, :, None, None]

    needs = grad_enabled() and (x.requires_grad or gamma.requires_grad or beta.requires_grad)
    out = Tensor(out_data[0] if squeeze else out_data, needs)
    if needs:
        def bwd():
            g = out.grad
            if g is None:
                return
            gb = g.reshape(n, c, h, w)
            xhat = (xb - mu[None, :, None, None]) * inv[None, :, None, None]
            if beta.requires_grad:
                beta.bump_grad(gb.sum(axis=axes))
            if gamma.requires_grad:
                gamma.bump_grad((gb * xhat).sum(axis=axes))
            if x.requires_grad:
                dxhat = gb * gamma.data[None, :, None, None]
                if batch_stats:
                    m_count = n * h * w
                    t1 = dxhat.sum(axis=axes)[None, :, None, None]
                    t2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                    dx = (inv[None, :, None, None] / m_count) * (m_count * dxhat - t1 - xhat * t2)
                else:
                    dx = dxhat * inv[None, :, None, None]
                x.bump_grad(dx[0] if squeeze else dx)

        record(bwd)
    return out


def softmax_per_pixel(logits: Tensor) -> Tensor:
    """Channelwise softmax at every pixel, stabilized by max subtraction."""
    xb, squeeze = _as_batch(logits)
    z = xb - xb.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    needs = grad_enabled() and logits.requires_grad
    out = Tensor(p[0] if squeeze else p, needs)
    if needs:
        def bwd():
            g = out.grad
            if g is None:
                return
            gb = g.reshape(p.shape)
            dot = (gb * p).sum(axis=1, keepdims=True)
            dx = p * (gb - dot)
            logits.bump_grad(dx[0] if squeeze else dx)

        record(bwd)
    return out


def weighted_cross_entropy(probs: Tensor, labels: np.ndarray,
                           class_weights: np.ndarray, void_label: int = 255) -> Tensor:
    """Mean over non-void pixels of -w[y] * log(probs[y]).

    Void pixels contribute neither loss nor gradient. The log argument is
    clamped below at 1e-12.
    """
    pb, squeeze = _as_batch(probs)
    lab = np.asarray(labels)
    lb = lab[None] if squeeze and lab.ndim == 2 else lab
    n, c, h, w = pb.shape
    if lb.shape != (n, h, w):
        raise ShapeError(f"label extents {lb.shape} do not match probabilities {(n, h, w)}")
    weights = np.asarray(class_weights, dtype=np.float32)
    if weights.shape != (c,):
        raise ShapeError(f"expected {c} class weights, got extents {weights.shape}")

    valid = lb != void_label
    bad = valid & ((lb < 0) | (lb >= c))
    if bad.any():
        raise DataError(f"label value {int(lb[bad][0])} outside 0..{c - 1} and not void")
    nvalid = int(valid.sum())
    if nvalid == 0:
        raise ContractError("all pixels are void; loss undefined")

    lc = np.where(valid, lb, 0).astype(np.intp)
    py = np.take_along_axis(pb, lc[:, None], axis=1)[:, 0]
    wmap = weights[lc] * valid
    pclamp = np.maximum(py, np.float32(LOG_CLAMP))
    loss_val = float((wmap.astype(np.float64) * -np.log(pclamp.astype(np.float64))).sum() / nvalid)

    needs = grad_enabled() and probs.requires_grad
    out = Tensor(np.float32(loss_val), needs)
    if needs:
        def bwd():
            g = out.grad
            if g is None:
                return
            dpy = np.where(valid & (py >= LOG_CLAMP), -wmap / (pclamp * nvalid), 0.0)
            dpy = (dpy * g[0]).astype(np.float32)
            dpb = np.zeros_like(pb)
            np.put_along_axis(dpb, lc[:, None], dpy[:, None], axis=1)
            probs.bump_grad(dpb[0] if squeeze else dpb)

        record(bwd)
    return out
