"""Confusion-matrix segmentation metrics and before/after reports.

Undefined ratios (0/0) are reported as ``None`` and excluded from macro
averages; the number of exclusions is recorded alongside each average.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "iou")


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ShapeError(f"confusion counts must be {num_classes}x{num_classes}, got {counts.shape}")
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        self.counts = counts

    def update(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        c = self.num_classes
        for name, arr in (("prediction", pred), ("truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise DataError(f"{name} index out of range [0, {c}): min {arr.min()}, max {arr.max()}")
        idx = truth.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn_tn(self, c: int):
        tp = int(self.counts[c, c])
        fn = int(self.counts[c].sum()) - tp
        fp = int(self.counts[:, c].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(num_classes).update(pred, truth)


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass
class ClassMetrics:
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    iou: Optional[float]

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def class_metrics(cm: ConfusionMatrix, c: int) -> ClassMetrics:
    if not 0 <= c < cm.num_classes:
        raise DataError(f"class index {c} out of range [0, {cm.num_classes})")
    tp, fp, fn, tn = cm.tp_fp_fn_tn(c)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = _ratio(2 * precision * recall, precision + recall)
    return ClassMetrics(
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        precision=precision,
        recall=recall,
        f1=f1,
        iou=_ratio(tp, tp + fp + fn),
    )


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    class_names: List[str]
    per_class: List[ClassMetrics]
    pixel_accuracy: float
    macro: Dict[str, Optional[float]]
    excluded: Dict[str, int]
    mean_iou: Optional[float] = field(default=None)

    def to_dict(self) -> dict:
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "mean_iou": self.mean_iou,
            "macro": self.macro,
            "excluded_undefined": self.excluded,
            "per_class": {name: m.as_dict() for name, m in zip(self.class_names, self.per_class)},
            "confusion": self.confusion.to_list(),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = list(d["class_names"])
        cm = ConfusionMatrix(len(names), np.array(d["confusion"]))
        return aggregate(cm, names)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"{'class':<22}" + "".join(f"{m:>11}" for m in METRIC_NAMES)]
        for name, m in zip(self.class_names, self.per_class):
            lines.append(f"{name:<22}" + "".join(_fmt(getattr(m, k)) for k in METRIC_NAMES))
        lines.append(f"{'macro average':<22}" + "".join(_fmt(self.macro[k]) for k in METRIC_NAMES))
        lines.append(f"pixel accuracy {self.pixel_accuracy:.4f}   mean IoU {_fmt(self.mean_iou).strip()}")
        return "\n".join(lines)


def _fmt(v: Optional[float]) -> str:
    return f"{'undef':>11}" if v is None else f"{v:>11.4f}"


def _mean_defined(values: Iterable[Optional[float]]):
    vals = [v for v in values if v is not None]
    skipped = sum(1 for v in values if v is None)
    return (float(np.mean(vals)) if vals else None), skipped


def aggregate(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    """Per-class metrics, overall pixel accuracy and macro averages."""
    if cm.total == 0:
        raise DataError("cannot aggregate an empty confusion matrix")
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(cm.num_classes)]
    if len(names) != cm.num_classes:
        raise ShapeError(f"{len(names)} class names for {cm.num_classes} classes")
    per_class = [class_metrics(cm, c) for c in range(cm.num_classes)]
    macro, excluded = {}, {}
    for k in METRIC_NAMES:
        macro[k], excluded[k] = _mean_defined([getattr(m, k) for m in per_class])
    return MetricsReport(
        confusion=cm,
        class_names=names,
        per_class=per_class,
        pixel_accuracy=float(np.trace(cm.counts) / cm.total),
        macro=macro,
        excluded=excluded,
        mean_iou=macro["iou"],
    )


# --- emission ---------------------------------------------------------------

def history_rows(epoch: int, report: MetricsReport, extra: Optional[Dict[str, float]] = None):
    """Long-format rows ``(epoch, metric, class, value)`` for one epoch."""
    rows = [(epoch, "pixel_accuracy", "all", report.pixel_accuracy)]
    for k in METRIC_NAMES:
        rows.append((epoch, f"macro_{k}", "all", report.macro[k]))
    for name, m in zip(report.class_names, report.per_class):
        for k in METRIC_NAMES:
            rows.append((epoch, k, name, getattr(m, k)))
    for k, v in (extra or {}).items():
        rows.append((epoch, k, "all", v))
    return rows


def write_history_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "metric", "class", "value"])
        for epoch, metric, cls, value in rows:
            w.writerow([epoch, metric, cls, "" if value is None else repr(float(value))])


def compare_reports(before: MetricsReport, after: MetricsReport) -> dict:
    """Side-by-side aggregate and per-class values with deltas."""
    if before.class_names != after.class_names:
        raise DataError("before/after reports use different class lists")

    def triple(b, a):
        delta = None if a is None or b is None else a - b
        return {"before": b, "after": a, "delta": delta}

    out = {
        "aggregate": {"pixel_accuracy": triple(before.pixel_accuracy, after.pixel_accuracy)},
        "per_class": {},
    }
    for k in METRIC_NAMES:
        out["aggregate"][k] = triple(before.macro[k], after.macro[k])
    for name, b, a in zip(before.class_names, before.per_class, after.per_class):
        out["per_class"][name] = {k: triple(getattr(b, k), getattr(a, k)) for k in METRIC_NAMES}
    return out


def render_comparison(before: MetricsReport, after: MetricsReport) -> str:
    """Aligned before/after/delta table: aggregate block then per-class accuracy."""
    cmp = compare_reports(before, after)
    labels = {
        "pixel_accuracy": "Average accuracy",
        "precision": "Precision",
        "recall": "Recall",
        "f1": "F1 measure",
        "iou": "IoU score",
        "accuracy": "Class-mean accuracy",
    }
    head = f"{'':<24}{'Before':>10}{'After':>10}{'Delta':>10}"
    lines = [head]
    for key in ("pixel_accuracy", "accuracy", "precision", "recall", "f1", "iou"):
        t = cmp["aggregate"][key]
        lines.append(f"{labels[key]:<24}" + "".join(_fmt10(t[c]) for c in ("before", "after", "delta")))
    for metric in METRIC_NAMES:
        lines.append("")
        lines.append(f"{'per-class ' + metric:<24}{'Before':>10}{'After':>10}{'Delta':>10}")
        for name, d in cmp["per_class"].items():
            t = d[metric]
            lines.append(f"{name:<24}" + "".join(_fmt10(t[c]) for c in ("before", "after", "delta")))
    return "\n".join(lines)


def _fmt10(v: Optional[float]) -> str:
    return f"{'undef':>10}" if v is None else f"{v:>10.4f}"
