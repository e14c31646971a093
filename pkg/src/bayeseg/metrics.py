"""Segmentation metrics and uncertainty analyses.

All statistics exclude void pixels. Per-class accuracy is the recall
cm[c,c]/row_c; classes with no ground-truth pixels are excluded from the
class average, and classes absent from both rows and columns are excluded
from the mean IoU.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dataset import VOID_LABEL
from .errors import ContractError, DataError
from .mc import McAccumulator, mc_inference, sample_probs, weight_avg_inference
from .model import SegModel


class ConfusionMatrix:
    """C x C pixel counts; entry (i,j) counts true class i predicted as j."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), np.int64)

    def accumulate(self, prediction: np.ndarray, labels: np.ndarray,
                   void_label: int = VOID_LABEL) -> "ConfusionMatrix":
        if prediction.shape != labels.shape:
            raise ContractError(
                f"prediction extents {prediction.shape} do not match labels {labels.shape}")
        c = self.num_classes
        valid = labels != void_label
        t = labels[valid].astype(np.int64)
        p = prediction[valid].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= c):
            bad = t[(t < 0) | (t >= c)][0]
            raise DataError(f"label value {int(bad)} outside 0..{c - 1} and not void")
        if p.size and (p.min() < 0 or p.max() >= c):
            bad = p[(p < 0) | (p >= c)][0]
            raise DataError(f"prediction value {int(bad)} outside 0..{c - 1}")
        self.counts += np.bincount(c * t + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    global_accuracy: float
    per_class_accuracy: np.ndarray  # NaN where the class has no true pixels
    class_average: float
    per_class_iou: np.ndarray       # NaN where the class is absent entirely
    mean_iou: float


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ContractError("empty confusion matrix")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)

    acc = np.full(cm.num_classes, np.nan)
    has_true = rows > 0
    acc[has_true] = diag[has_true] / rows[has_true]

    union = rows + cols - diag
    iou = np.full(cm.num_classes, np.nan)
    seen = union > 0
    iou[seen] = diag[seen] / union[seen]

    return MetricsReport(
        global_accuracy=float(diag.sum() / total),
        per_class_accuracy=acc,
        class_average=float(np.nanmean(acc)) if has_true.any() else float("nan"),
        per_class_iou=iou,
        mean_iou=float(np.nanmean(iou)) if seen.any() else float("nan"),
    )


@dataclass
class PercentileReport:
    rows: list[tuple[int, float]]  # (percentile, accuracy over most-confident fraction)


def percentile_table(uncertainty_maps, predictions, label_maps,
                     percentiles=(90, 50, 10, 0),
                     void_label: int = VOID_LABEL) -> PercentileReport:
    """Accuracy over the most-confident pixel fractions.

    Pools all non-void pixels of the test set, sorts them ascending by
    overall uncertainty (stable, so ties keep image-then-row-major order),
    and reports for each percentile p the accuracy over the (100-p)%
    lowest-uncertainty pixels.
    """
    unc, correct = [], []
    for u, pred, lab in zip(uncertainty_maps, predictions, label_maps):
        valid = (lab != void_label).ravel()
        unc.append(u.ravel()[valid])
        correct.append((pred.ravel()[valid] == lab.ravel()[valid]))
    unc = np.concatenate(unc)
    correct = np.concatenate(correct)
    n = unc.size
    if n == 0:
        raise ContractError("no non-void pixels to evaluate")

    order = np.argsort(unc, kind="stable")
    cum_correct = np.cumsum(correct[order])
    rows = []
    for p in percentiles:
        k = int(round(n * (100 - p) / 100.0))
        k = max(k, 1)
        rows.append((p, float(cum_correct[k - 1] / k)))
    return PercentileReport(rows)


@dataclass
class ClassUncertaintyReport:
    rows: list[tuple[int, float, float, float]]  # (class, mean_uncertainty, accuracy, frequency)
    spearman_uncertainty_accuracy: float
    spearman_uncertainty_frequency: float


def class_uncertainty_report(uncertainty_maps, predictions, label_maps, num_classes: int,
                             void_label: int = VOID_LABEL) -> ClassUncertaintyReport:
    """Per-class mean uncertainty (over ground-truth pixels), accuracy and
    dataset frequency, with Spearman rank correlations across classes.

    Classes without ground-truth pixels get frequency 0 and NaN uncertainty
    and accuracy; correlations are computed over the defined classes and
    are NaN when fewer than two classes are defined.
    """
    unc_sum = np.zeros(num_classes, np.float64)
    gt_count = np.zeros(num_classes, np.int64)
    cm = ConfusionMatrix(num_classes)
    for u, pred, lab in zip(uncertainty_maps, predictions, label_maps):
        cm.accumulate(pred, lab, void_label)
        valid = lab != void_label
        t = lab[valid].astype(np.int64)
        unc_sum += np.bincount(t, weights=u[valid].astype(np.float64), minlength=num_classes)
        gt_count += np.bincount(t, minlength=num_classes)

    total = gt_count.sum()
    if total == 0:
        raise ContractError("no non-void pixels to evaluate")
    report = metrics(cm)
    rows = []
    for c in range(num_classes):
        if gt_count[c] > 0:
            mean_u = float(unc_sum[c] / gt_count[c])
            acc = float(report.per_class_accuracy[c])
        else:
            mean_u = float("nan")
            acc = float("nan")
        rows.append((c, mean_u, acc, float(gt_count[c] / total)))

    defined = [r for r in rows if not math.isnan(r[1]) and not math.isnan(r[2])]
    if len(defined) >= 2:
        u = [r[1] for r in defined]
        with warnings.catch_warnings():
            # constant inputs make the correlation undefined; NaN is the flag
            warnings.simplefilter("ignore", stats.ConstantInputWarning)
            rho_acc = float(stats.spearmanr(u, [r[2] for r in defined]).statistic)
            rho_freq = float(stats.spearmanr(u, [r[3] for r in defined]).statistic)
    else:
        rho_acc = float("nan")
        rho_freq = float("nan")
    return ClassUncertaintyReport(rows, rho_acc, rho_freq)


def sample_count_study(model: SegModel, samples, t_list, trials: int, base_seed=0):
    """Accuracy of the Monte Carlo mean prediction as a function of T.

    For each trial, samples are drawn in fixed index order from streams
    keyed by (base_seed, trial, t) and global accuracy is snapshotted at
    every requested T; the snapshot at T equals a direct mc_inference run
    with that sample count. A weight-averaging reference row labeled "wa"
    is included. Returns rows of (label, mean, std) with std over trials
    (sample standard deviation).
    """
    if trials < 2:
        raise ContractError("trials must be >= 2")
    t_list = sorted(set(int(t) for t in t_list))
    if not t_list or t_list[0] < 1:
        raise ContractError("t_list entries must be >= 1")
    samples = list(samples)
    num_classes = model.config.num_classes

    accs = np.zeros((trials, len(t_list)), np.float64)
    for trial in range(trials):
        accums = [McAccumulator(num_classes, s.image.shape[-2], s.image.shape[-1])
                  for s in samples]
        cut = 0
        for t in range(t_list[-1]):
            for sample, acc in zip(samples, accums):
                acc.update(sample_probs(model, sample.image, [base_seed, trial], t))
            if t + 1 == t_list[cut]:
                correct = 0
                valid = 0
                for sample, acc in zip(samples, accums):
                    pred = acc.mean().argmax(axis=0)
                    ok = sample.labels != VOID_LABEL
                    correct += int((pred[ok] == sample.labels[ok]).sum())
                    valid += int(ok.sum())
                accs[trial, cut] = correct / valid
                cut += 1

    correct = 0
    valid = 0
    for sample in samples:
        _, pred = weight_avg_inference(model, sample.image)
        ok = sample.labels != VOID_LABEL
        correct += int((pred[ok] == sample.labels[ok]).sum())
        valid += int(ok.sum())
    wa_acc = correct / valid

    rows = [(str(t), float(accs[:, i].mean()), float(accs[:, i].std(ddof=1)))
            for i, t in enumerate(t_list)]
    rows.append(("wa", wa_acc, 0.0))
    return rows


@dataclass
class EvaluationResult:
    metrics: MetricsReport
    percentiles: PercentileReport
    class_uncertainty: ClassUncertaintyReport
    predictions: list[np.ndarray]
    uncertainty_maps: list[np.ndarray]


def evaluate_dataset(model: SegModel, samples, mode: str, mc_samples: int = 50,
                     seed=0) -> EvaluationResult:
    """Full evaluation over a dataset.

    mode "mc" runs Monte Carlo dropout inference per image; mode "wa" runs
    the deterministic weight-averaging pass, for which every uncertainty
    map is identically zero.
    """
    if mode not in ("wa", "mc"):
        raise ContractError(f"unknown evaluation mode {mode!r}")
    samples = list(samples)
    if not samples:
        raise ContractError("dataset is empty")
    num_classes = model.config.num_classes
    cm = ConfusionMatrix(num_classes)
    predictions, unc_maps, label_maps = [], [], []
    for sample in samples:
        if mode == "mc":
            result = mc_inference(model, sample.image, mc_samples, seed)
            pred = result.prediction
            unc = result.overall_uncertainty
        else:
            _, pred = weight_avg_inference(model, sample.image)
            unc = np.zeros(pred.shape, np.float32)
        cm.accumulate(pred, sample.labels)
        predictions.append(pred)
        unc_maps.append(unc)
        label_maps.append(sample.labels)
    return EvaluationResult(
        metrics=metrics(cm),
        percentiles=percentile_table(unc_maps, predictions, label_maps),
        class_uncertainty=class_uncertainty_report(unc_maps, predictions, label_maps,
                                                   num_classes),
        predictions=predictions,
        uncertainty_maps=unc_maps,
    )


# -- CSV emission (UTF-8, LF, header row) --

def _open_csv(path):
    return open(path, "w", encoding="utf-8", newline="")


def write_metrics_csv(report: MetricsReport, path) -> None:
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "accuracy", "iou"])
        for c in range(len(report.per_class_accuracy)):
            w.writerow([c, f"{report.per_class_accuracy[c]:.6f}",
                        f"{report.per_class_iou[c]:.6f}"])
        w.writerow(["global_avg", f"{report.global_accuracy:.6f}", ""])
        w.writerow(["class_avg", f"{report.class_average:.6f}", ""])
        w.writerow(["mean_iou", "", f"{report.mean_iou:.6f}"])


def write_percentiles_csv(report: PercentileReport, path) -> None:
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["percentile", "accuracy"])
        for p, acc in report.rows:
            w.writerow([p, f"{acc:.6f}"])


def write_class_uncertainty_csv(report: ClassUncertaintyReport, path) -> None:
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "mean_uncertainty", "accuracy", "frequency"])
        for c, mean_u, acc, freq in report.rows:
            w.writerow([c, f"{mean_u:.6g}", f"{acc:.6f}", f"{freq:.6f}"])
        w.writerow(["spearman_unc_acc", f"{report.spearman_uncertainty_accuracy:.6f}", "", ""])
        w.writerow(["spearman_unc_freq", f"{report.spearman_uncertainty_frequency:.6f}", "", ""])


def write_study_csv(rows, path) -> None:
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["T", "mean", "std"])
        for label, mean, std in rows:
            w.writerow([label, f"{mean:.6f}", f"{std:.6f}"])
