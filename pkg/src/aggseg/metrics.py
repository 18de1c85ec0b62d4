"""Confusion counting and the segmentation scores (OA, recall, precision, F1, MF1).

Classes are indexed by their label value. For the binary task label 1 is
aggregate and label 0 is suspension. Undefined scores (zero denominators) are NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError

LABEL_NAMES = {1: "aggregate", 0: "suspension"}
UNDEFINED = math.nan

REPORT_COLUMNS = (
    "variant", "setup", "OA", "MF1",
    "aggregate_recall", "aggregate_precision", "aggregate_f1",
    "suspension_recall", "suspension_precision", "suspension_f1",
)


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN/TN accumulator. Merge with ``+``."""

    num_classes: int = 2
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)
    tn: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))
            else:
                setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).copy())

    @property
    def total(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other):
        if self.num_classes != other.num_classes:
            raise InputError("cannot merge counts with different class numbers")
        return ConfusionCounts(self.num_classes, self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("tp", "fp", "fn", "tn")}


def accumulate(counts: ConfusionCounts, pred, ref) -> ConfusionCounts:
    """Return ``counts`` plus the pixelwise comparison of two hard label masks."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise InputError(f"mask shape mismatch {pred.shape} vs {ref.shape}")
    n = counts.num_classes
    p = pred.ravel().astype(np.int64)
    r = ref.ravel().astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= n or r.min() < 0 or r.max() >= n):
        raise InputError(f"labels must lie in [0, {n})")
    cm = np.bincount(r * n + p, minlength=n * n).reshape(n, n)  # rows: reference
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = p.size - tp - fp - fn
    return counts + ConfusionCounts(n, tp, fp, fn, tn)


def _pct(num, den):
    return 100.0 * num / den if den > 0 else UNDEFINED


def class_metrics(counts: ConfusionCounts, class_index: int):
    """(recall %, precision %, F1 %) for one class."""
    tp = int(counts.tp[class_index])
    recall = _pct(tp, tp + int(counts.fn[class_index]))
    precision = _pct(tp, tp + int(counts.fp[class_index]))
    if math.isnan(recall) or math.isnan(precision):
        f1 = UNDEFINED
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return recall, precision, f1


def aggregate_metrics(counts: ConfusionCounts):
    """(OA %, MF1 %).

    A class absent from both prediction and reference is left out of MF1; any
    other undefined F1 counts as 0.
    """
    total = counts.total
    if total == 0:
        raise InputError("no pixels accumulated")
    oa = 100.0 * float(counts.tp.sum()) / total
    f1s = []
    for i in range(counts.num_classes):
        present = counts.tp[i] + counts.fn[i] + counts.fp[i] > 0
        if not present:
            continue
        f1 = class_metrics(counts, i)[2]
        f1s.append(0.0 if math.isnan(f1) else f1)
    mf1 = float(np.mean(f1s)) if f1s else UNDEFINED
    return oa, mf1


def mean_f1(f1_scores):
    return float(np.mean(f1_scores))


def metrics_row(counts: ConfusionCounts, variant="", setup="") -> dict:
    oa, mf1 = aggregate_metrics(counts)
    row = {"variant": variant, "setup": setup, "OA": oa, "MF1": mf1}
    for label in (1, 0):
        name = LABEL_NAMES[label]
        recall, precision, f1 = class_metrics(counts, label)
        row[f"{name}_recall"] = recall
        row[f"{name}_precision"] = precision
        row[f"{name}_f1"] = f1
    return row


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
