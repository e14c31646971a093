"""Class balancing, SGD mechanics, the training loop and BN finalization."""

import numpy as np
import pytest

from bayeseg.dataset import SampleRecord, SynthConfig, synthesize_sample
from bayeseg.errors import ContractError, NumericsError
from bayeseg.layers import conv2d
from bayeseg.model import ModelConfig, build_model
from bayeseg.rng import Rng
from bayeseg.tensor import Parameter, Tensor
from bayeseg.train import (TrainConfig, class_frequencies, finalize_batchnorm,
                           sgd_step, train_loop)


def sample_with_labels(labels, image=None):
    labels = np.asarray(labels, np.int64)
    h, w = labels.shape
    if image is None:
        image = np.zeros((3, h, w), np.float32)
    return SampleRecord(image=image, labels=labels, id="t")


class TestClassFrequencies:
    def test_hand_constructed_two_image_set(self):
        # per image: 8 px of class 0, 4 of class 1, 4 of class 2
        labels = np.zeros((4, 4), np.int64)
        labels[0] = 1
        labels[1] = 2
        labels[2:] = 0
        labels[0, :] = 1
        labels[1, :] = 2
        stats = class_frequencies([sample_with_labels(labels)] * 2, 3)
        np.testing.assert_allclose(stats.frequencies, [0.5, 0.25, 0.25])
        np.testing.assert_allclose(stats.weights, [0.5, 1.0, 1.0])

    def test_uniform_frequencies_unit_weights(self):
        labels = np.array([[0, 1], [2, 3]], np.int64)
        stats = class_frequencies([sample_with_labels(labels)], 4)
        np.testing.assert_allclose(stats.weights, np.ones(4))

    def test_absent_class_weight_zero(self):
        labels = np.array([[0, 0], [1, 1]], np.int64)
        stats = class_frequencies([sample_with_labels(labels)], 3)
        assert stats.weights[2] == 0.0

    def test_denominator_counts_images_containing_class(self):
        # class 1 appears only in image B: f_1 = 2 / 4 (B's non-void pixels)
        a = sample_with_labels(np.zeros((2, 2), np.int64))
        b = sample_with_labels(np.array([[1, 1], [0, 0]], np.int64))
        stats = class_frequencies([a, b], 2)
        np.testing.assert_allclose(stats.frequencies, [6 / 8, 2 / 4])

    def test_void_excluded_from_denominator(self):
        labels = np.array([[0, 255], [1, 255]], np.int64)
        stats = class_frequencies([sample_with_labels(labels)], 2)
        np.testing.assert_allclose(stats.frequencies, [0.5, 0.5])

    def test_all_void_rejected(self):
        labels = np.full((2, 2), 255, np.int64)
        with pytest.raises(ContractError):
            class_frequencies([sample_with_labels(labels)], 2)


class TestSgdStep:
    def test_plain_step(self):
        p = Parameter("w", np.array([1.0], np.float32))
        p.grad = np.array([2.0], np.float32)
        sgd_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.0, momentum=0.0))
        np.testing.assert_allclose(p.data, [0.8])
        assert p.grad is None

    def test_pure_decay(self):
        p = Parameter("w", np.array([1.0], np.float32))
        p.grad = np.array([0.0], np.float32)
        sgd_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.5, momentum=0.0))
        np.testing.assert_allclose(p.data, [0.95])

    def test_bias_exempt_from_decay(self):
        p = Parameter("b", np.array([1.0], np.float32), weight_decay=False)
        p.grad = np.array([0.0], np.float32)
        sgd_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.5, momentum=0.0))
        np.testing.assert_allclose(p.data, [1.0])

    def test_two_momentum_steps_match_hand_unroll(self):
        lr, mom, wd = np.float32(0.1), np.float32(0.9), np.float32(0.01)
        g1, g2 = np.float32(0.5), np.float32(-0.25)
        w = np.float32(2.0)
        v = np.float32(0.0)
        v = mom * v + (g1 + wd * w)
        w = w - lr * v
        v = mom * v + (g2 + wd * w)
        w = w - lr * v

        p = Parameter("w", np.array([2.0], np.float32))
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01, momentum=0.9)
        p.grad = np.array([0.5], np.float32)
        sgd_step([p], cfg)
        p.grad = np.array([-0.25], np.float32)
        sgd_step([p], cfg)
        np.testing.assert_allclose(p.data, [w], rtol=1e-6)

    def test_nan_gradient_aborts(self):
        p = Parameter("w", np.array([1.0], np.float32))
        p.grad = np.array([np.nan], np.float32)
        with pytest.raises(NumericsError):
            sgd_step([p], TrainConfig())


def tiny_dataset(count=10, classes=3, size=16, seed=3, **kw):
    cfg = SynthConfig(width=size, height=size, num_classes=classes, count=count,
                      seed=seed, **kw)
    return [synthesize_sample(cfg, i) for i in range(count)]


def tiny_model(classes=3, seed=0, variant="central_enc_dec"):
    cfg = ModelConfig(num_classes=classes, stages=2, features=8,
                      dropout_variant=variant, seed=seed)
    return build_model(cfg, Rng(seed))


class TestTrainLoop:
    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        model = tiny_model()
        before = [p.data.copy() for p in model.parameters()]
        cfg = TrainConfig(learning_rate=0.0, weight_decay=0.0, momentum=0.0,
                          epochs=2, batch_size=4, seed=0)
        train_loop(model, tiny_dataset(), cfg)
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.data, b), p.name

    def test_fixed_seed_bitwise_identical_runs(self):
        def run():
            model = tiny_model()
            cfg = TrainConfig(epochs=2, batch_size=4, seed=11)
            train_loop(model, tiny_dataset(), cfg)
            return [p.data.copy() for p in model.parameters()]

        for pa, pb in zip(run(), run()):
            assert np.array_equal(pa, pb)

    def test_loss_decreases_on_learnable_set(self):
        model = tiny_model()
        cfg = TrainConfig(epochs=8, batch_size=4, seed=0)
        rows = train_loop(model, tiny_dataset(count=12), cfg)
        assert rows[-1][1] < rows[0][1]

    def test_log_file_format(self, tmp_path):
        model = tiny_model()
        log = tmp_path / "train.csv"
        cfg = TrainConfig(epochs=2, batch_size=4, seed=0)
        rows = train_loop(model, tiny_dataset(), cfg, log_path=log)
        lines = log.read_text().splitlines()
        assert len(lines) == 2
        for line, row in zip(lines, rows):
            epoch, loss, acc = line.split(",")
            assert int(epoch) == row[0]
            assert abs(float(loss) - row[1]) < 1e-5
            assert abs(float(acc) - row[2]) < 1e-5


class TestFinalizeBatchnorm:
    def test_constant_input_gives_near_zero_variance(self):
        # zero is the constant preserved by zero padding, so every BN input
        # is spatially constant and its exact variance is 0
        model = tiny_model(classes=2)
        img = np.zeros((3, 16, 16), np.float32)
        samples = [SampleRecord(image=img, labels=np.zeros((16, 16), np.int64), id=str(i))
                   for i in range(4)]
        finalize_batchnorm(model, samples)
        for name, bn in model.bn_states():
            assert bn.running_var.max() < 1e-5, name

    def test_first_layer_stats_match_bruteforce_aggregate(self):
        model = tiny_model()
        samples = tiny_dataset(count=5)
        finalize_batchnorm(model, samples)

        batch = Tensor(np.stack([s.image for s in samples]))
        acts = conv2d(model.enc_convs[0], batch).data.astype(np.float64)
        mean = acts.mean(axis=(0, 2, 3))
        var = acts.var(axis=(0, 2, 3))
        bn = model.enc_bns[0]
        np.testing.assert_allclose(bn.running_mean, mean, atol=1e-6)
        np.testing.assert_allclose(bn.running_var, var, atol=1e-6)

    def test_idempotent(self):
        model = tiny_model()
        samples = tiny_dataset(count=5)
        finalize_batchnorm(model, samples)
        first = [(bn.running_mean.copy(), bn.running_var.copy())
                 for _, bn in model.bn_states()]
        finalize_batchnorm(model, samples)
        for (m1, v1), (_, bn) in zip(first, model.bn_states()):
            assert np.array_equal(m1, bn.running_mean)
            assert np.array_equal(v1, bn.running_var)
