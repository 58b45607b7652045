"""Sensitivity, trigger accuracy and classification metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

METRIC_FIELDS = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "kappa")


def eta(dv1: float, dv2: float) -> float:
    """Simplified harmonic mean of the two channels' peak voltage changes (mV)."""
    if dv1 < 0 or dv2 < 0:
        raise ValueError("peak voltage changes must be non-negative")
    if dv1 + dv2 == 0:
        raise ValueError("eta is undefined when both channels are flat")
    return dv1 * dv2 / (dv1 + dv2)


def trigger_accuracy(triggered: int, actual: int) -> float:
    if actual <= 0:
        raise ValueError("actual pest count must be positive")
    return 100.0 * (1.0 - abs(triggered - actual) / actual)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"expected a {k}x{k} table")
        if np.any(self.counts < 0):
            raise ValueError("negative counts")

    @classmethod
    def from_labels(cls, truth, pred, class_names) -> "ConfusionMatrix":
        k = len(class_names)
        cm = np.zeros((k, k), dtype=np.int64)
        np.add.at(cm, (np.asarray(truth, int), np.asarray(pred, int)), 1)
        return cls(cm, tuple(class_names))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if tuple(self.class_names) != tuple(other.class_names):
            raise ValueError("class names differ")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["truth\\pred"] + list(self.class_names))
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name] + [int(v) for v in row])


def classification_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Accuracy, macro precision/recall/F1 and Cohen's kappa.

    A class never predicted (or never present) contributes 0 to the macro
    precision (or recall) average; its F1 is 0 when both are 0.
    """
    c = cm.counts.astype(float)
    total = c.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    true_tot = c.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    s = prec + rec
    f1 = np.divide(2 * prec * rec, s, out=np.zeros_like(tp), where=s > 0)
    p_o = tp.sum() / total
    p_e = float(np.sum(pred_tot * true_tot)) / total**2
    kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return {
        "accuracy": float(p_o),
        "macro_precision": float(prec.mean()),
        "macro_recall": float(rec.mean()),
        "macro_f1": float(f1.mean()),
        "kappa": float(kappa),
    }


def majority_baseline(train_labels, test_labels) -> float:
    """Accuracy of always predicting the most frequent training label."""
    vals, cnt = np.unique(np.asarray(train_labels), return_counts=True)
    mode = vals[np.argmax(cnt)]
    return float(np.mean(np.asarray(test_labels) == mode))


def write_metrics_json(metrics: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(rows: list[dict], path, key_fields=()) -> None:
    fields = list(key_fields) + list(METRIC_FIELDS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([row[f] if f in key_fields else f"{row[f]:.6f}" for f in fields])
