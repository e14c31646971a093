"""End-to-end SGD with median-frequency class balancing.

Batch order, dropout masks and therefore final checkpoints are fully
determined by the training seed. After training, batch-norm running
statistics are replaced by exact aggregates over the training set
(computed with dropout disabled), which is also how evaluation-time
statistics are produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import VOID_LABEL
from .errors import ContractError, NumericsError
from .layers import softmax_per_pixel, weighted_cross_entropy
from .model import SegModel, forward
from .rng import Rng
from .tensor import Parameter, Tensor, backward

# Stream namespaces under the training seed.
_NS_SHUFFLE = 1
_NS_DROPOUT = 2

_FINALIZE_BATCH = 16
_FINALIZE_SEED = 0xB5E6
_FINALIZE_PASSES = 4


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    class_balancing: bool = True

    def validate(self):
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must be in [0,1)")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class ClassStats:
    pixel_counts: np.ndarray     # per-class non-void pixel totals
    present_totals: np.ndarray   # non-void pixels summed over images containing the class
    frequencies: np.ndarray
    weights: np.ndarray


def class_frequencies(samples, num_classes: int, void_label: int = VOID_LABEL) -> ClassStats:
    """Median-frequency balancing weights.

    f_c = (pixels of class c) / (non-void pixels of images where c appears);
    w_c = median(f over present classes) / f_c, and 0 for absent classes.
    """
    counts = np.zeros(num_classes, np.int64)
    present = np.zeros(num_classes, np.int64)
    total_valid = 0
    n_images = 0
    for sample in samples:
        n_images += 1
        labels = sample.labels
        valid = labels != void_label
        nvalid = int(valid.sum())
        total_valid += nvalid
        in_image = np.bincount(labels[valid].ravel(), minlength=num_classes)[:num_classes]
        counts += in_image
        present += np.where(in_image > 0, nvalid, 0)
    if n_images == 0:
        raise ContractError("dataset is empty")
    if total_valid == 0:
        raise ContractError("dataset has no non-void pixels")

    freqs = np.zeros(num_classes, np.float64)
    here = counts > 0
    freqs[here] = counts[here] / present[here]
    med = float(np.median(freqs[here]))
    weights = np.zeros(num_classes, np.float64)
    weights[here] = med / freqs[here]
    return ClassStats(counts, present, freqs, weights.astype(np.float32))


def sgd_step(params: list[Parameter], config: TrainConfig) -> None:
    """One momentum-SGD update; grads are consumed and zeroed.

    v <- momentum*v + grad + weight_decay*w (decay skipped for parameters
    flagged decay-exempt, i.e. biases); w <- w - lr*v.
    """
    lr = np.float32(config.learning_rate)
    mom = np.float32(config.momentum)
    wd = np.float32(config.weight_decay)
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in parameter {p.name!r}")
        if p.weight_decay and wd != 0:
            g = g + wd * p.data
        p.velocity *= mom
        p.velocity += g
        p.data -= lr * p.velocity
        p.grad = None


def _global_accuracy(pred: np.ndarray, labels: np.ndarray, void_label: int = VOID_LABEL):
    valid = labels != void_label
    return int((pred[valid] == labels[valid]).sum()), int(valid.sum())


def train_loop(model: SegModel, samples, config: TrainConfig,
               log_path=None) -> list[tuple[int, float, float]]:
    """Train in place; returns (epoch, mean_loss, train_global_acc) rows.

    Mini-batches are drawn by a seeded shuffle each epoch. The logged
    accuracy is the running train-mode accuracy over the epoch's batches.
    """
    config.validate()
    samples = list(samples)
    if not samples:
        raise ContractError("dataset is empty")
    num_classes = model.config.num_classes
    if config.class_balancing:
        weights = class_frequencies(samples, num_classes).weights
    else:
        weights = np.ones(num_classes, np.float32)

    images = [s.image for s in samples]
    labels = [s.labels for s in samples]
    params = model.parameters()
    rows = []
    log_file = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    try:
        for epoch in range(config.epochs):
            order = Rng.stream(config.seed, _NS_SHUFFLE, epoch).permutation(len(samples))
            loss_sum = 0.0
            pixel_sum = 0
            correct = 0
            valid_total = 0
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                xb = np.stack([images[i] for i in idx])
                yb = np.stack([labels[i] for i in idx])
                rng = Rng.stream(config.seed, _NS_DROPOUT, epoch, step)
                logits = forward(model, Tensor(xb), "train", rng)
                probs = softmax_per_pixel(logits)
                loss = weighted_cross_entropy(probs, yb, weights, VOID_LABEL)

                pred = probs.data.argmax(axis=1)
                c, v = _global_accuracy(pred, yb)
                correct += c
                valid_total += v
                loss_sum += loss.item() * v
                pixel_sum += v

                backward(loss)
                sgd_step(params, config)
            mean_loss = loss_sum / pixel_sum
            acc = correct / valid_total
            rows.append((epoch, mean_loss, acc))
            if log_file:
                log_file.write(f"{epoch},{mean_loss:.6f},{acc:.6f}\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return rows


def finalize_batchnorm(model: SegModel, samples, batch_size: int = _FINALIZE_BATCH,
                       sampled_passes: int = _FINALIZE_PASSES, plain_passes: int = 1) -> None:
    """Recompute BN running statistics as exact aggregates over `samples`.

    Each collection pass normalizes every batch by its own statistics, so
    the result does not depend on the pre-existing running statistics and
    repeated finalization is idempotent. The aggregate covers
    `sampled_passes` sweeps with dropout active (fixed internal mask
    streams) plus `plain_passes` dropout-free sweeps, so the stored
    statistics describe the activations both stochastic and
    weight-averaging test passes see; with variant "none" this reduces to
    a single deterministic sweep.
    """
    samples = list(samples)
    if not samples:
        raise ContractError("dataset is empty")
    stochastic = model.sites and model.config.dropout_p > 0
    schedule = [True] * sampled_passes + [False] * plain_passes if stochastic else [False]
    states = [bn for _, bn in model.bn_states()]
    for bn in states:
        bn.begin_collect()
    for rep, sampled in enumerate(schedule):
        for step, start in enumerate(range(0, len(samples), batch_size)):
            chunk = samples[start:start + batch_size]
            xb = np.stack([s.image for s in chunk])
            rng = Rng.stream(_FINALIZE_SEED, rep, step) if sampled else None
            forward(model, Tensor(xb), "collect", rng)
    for bn in states:
        bn.finish_collect()
