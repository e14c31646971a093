"""Monte Carlo dropout inference and posterior summaries.

Each of the T stochastic forward passes uses the random stream addressed
by (base_seed, t), so a sample's content depends only on its index and the
statistics are reproducible and invariant to acquisition order. Mean and
variance accumulate in float64 in fixed sample order; variance is the
population variance (divide by T), so T=1 yields exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .layers import softmax_per_pixel
from .model import SegModel, forward
from .rng import Rng
from .tensor import Tensor


@dataclass
class McResult:
    """Posterior summary of T sampled softmax outputs for one image."""

    samples_taken: int
    mean_probs: np.ndarray           # [C,H,W]
    var_probs: np.ndarray            # [C,H,W] per-class population variance
    overall_uncertainty: np.ndarray  # [H,W] mean over classes of var_probs
    variation_ratio: np.ndarray      # [H,W]
    prediction: np.ndarray           # [H,W] argmax of mean_probs, ties -> lowest
    samples: np.ndarray | None = None  # [T,C,H,W] when store_all was requested


class McAccumulator:
    """Streaming mean/variance and argmax agreement over sample passes."""

    def __init__(self, num_classes: int, height: int, width: int):
        self.count = 0
        self._sum = np.zeros((num_classes, height, width), np.float64)
        self._sumsq = np.zeros((num_classes, height, width), np.float64)
        self._votes = np.zeros((num_classes, height, width), np.int32)
        self._rows, self._cols = np.indices((height, width))

    def update(self, probs: np.ndarray) -> None:
        p64 = probs.astype(np.float64)
        self._sum += p64
        self._sumsq += p64 * p64
        top = probs.argmax(axis=0)
        self._votes[top, self._rows, self._cols] += 1
        self.count += 1

    def mean(self) -> np.ndarray:
        return (self._sum / self.count).astype(np.float32)

    def result(self) -> McResult:
        t = self.count
        mean64 = self._sum / t
        var64 = np.maximum(self._sumsq / t - mean64 * mean64, 0.0)
        mean = mean64.astype(np.float32)
        var = var64.astype(np.float32)
        agree = self._votes.max(axis=0)
        return McResult(
            samples_taken=t,
            mean_probs=mean,
            var_probs=var,
            overall_uncertainty=var64.mean(axis=0).astype(np.float32),
            variation_ratio=(1.0 - agree / t).astype(np.float32),
            prediction=mean.argmax(axis=0),
        )


def sample_probs(model: SegModel, x, base_seed, t: int) -> np.ndarray:
    """Softmax output of the stochastic forward pass for sample index t."""
    logits = forward(model, x, "mc_sample", Rng.stream(base_seed, t))
    return softmax_per_pixel(logits).data


def mc_inference(model: SegModel, x, T: int, base_seed, store_all: bool = False) -> McResult:
    """Summarize T Monte Carlo dropout samples for one image.

    The prediction is the argmax of the mean softmax; overall uncertainty
    is the per-class variance averaged over classes; the variation ratio is
    1 minus the fraction of samples agreeing with the modal per-sample
    argmax (modal ties resolve to the lowest class index).
    """
    if T < 1:
        raise ContractError(f"sample count must be >= 1, got {T}")
    if isinstance(x, Tensor):
        x = x.data
    if x.ndim != 3:
        raise ContractError("mc_inference expects a single [C,H,W] image")
    c, h, w = model.config.num_classes, x.shape[-2], x.shape[-1]
    acc = McAccumulator(c, h, w)
    kept = []
    for t in range(T):
        probs = sample_probs(model, x, base_seed, t)
        acc.update(probs)
        if store_all:
            kept.append(probs)
    result = acc.result()
    if store_all:
        result.samples = np.stack(kept)
    return result


def weight_avg_inference(model: SegModel, x):
    """Deterministic prediction with dropout removed.

    Returns (probs [C,H,W], prediction [H,W]); ties resolve to the lowest
    class index.
    """
    logits = forward(model, x, "weight_avg")
    probs = softmax_per_pixel(logits).data
    return probs, probs.argmax(axis=0)


def per_pixel_argmax_samples(model: SegModel, x, T: int, base_seed) -> np.ndarray:
    """Per-sample argmax maps [T,H,W], streams identical to mc_inference."""
    if T < 1:
        raise ContractError(f"sample count must be >= 1, got {T}")
    return np.stack([sample_probs(model, x, base_seed, t).argmax(axis=0) for t in range(T)])


def variation_ratio_from_argmax(argmax_samples: np.ndarray, num_classes: int):
    """Variation ratio and modal class from stacked argmax maps [T,H,W]."""
    t = argmax_samples.shape[0]
    counts = np.stack([(argmax_samples == k).sum(axis=0) for k in range(num_classes)])
    modal = counts.argmax(axis=0)
    agree = counts.max(axis=0)
    return (1.0 - agree / t).astype(np.float32), modal
