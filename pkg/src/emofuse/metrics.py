"""Evaluation metrics: confusion matrix, one-vs-rest precision / recall /
F1, accuracy, and per-class ROC curves with trapezoidal AUC.

Reported accuracy is multiclass trace(confusion)/N. That is not the same
number as the mean of the per-class one-vs-rest binary accuracies
(TP+TN)/N except in the binary case; only the former is reported as
"accuracy". Per-class metrics with an empty denominator are reported as 0
and flagged degenerate rather than NaN. Macro values are unweighted means
over classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import InputError


@dataclass
class ConfusionMatrix:
    """C x C counts; rows are the true class, columns the predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise InputError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise InputError("confusion matrix cells must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


@dataclass
class EvalReport:
    """Everything the CLI, service, and UI report about one evaluation."""

    confusion: ConfusionMatrix
    per_class: List[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    label_names: Tuple[str, ...]
    roc: Dict[int, List[Tuple[float, float]]] = field(default_factory=dict)
    auc: Dict[int, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label_names": list(self.label_names),
            "confusion": self.confusion.counts.tolist(),
            "per_class": [
                {
                    "label": self.label_names[i],
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                    "degenerate": m.degenerate,
                }
                for i, m in enumerate(self.per_class)
            ],
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "accuracy": self.accuracy,
            "roc": {
                self.label_names[c]: [[float(f), float(t)] for f, t in pts]
                for c, pts in self.roc.items()
            },
            "auc": {
                self.label_names[c]: (None if a is None else float(a))
                for c, a in self.auc.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        labels = tuple(d["label_names"])
        cm = ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64))
        per_class = [
            ClassMetrics(
                precision=float(row["precision"]),
                recall=float(row["recall"]),
                f1=float(row["f1"]),
                support=int(row["support"]),
                degenerate=bool(row.get("degenerate", False)),
            )
            for row in d["per_class"]
        ]
        report = cls(
            confusion=cm,
            per_class=per_class,
            macro_precision=float(d["macro"]["precision"]),
            macro_recall=float(d["macro"]["recall"]),
            macro_f1=float(d["macro"]["f1"]),
            accuracy=float(d["accuracy"]),
            label_names=labels,
            roc={
                labels.index(name): [(float(f), float(t)) for f, t in pts]
                for name, pts in d.get("roc", {}).items()
            },
            auc={
                labels.index(name): (None if a is None else float(a))
                for name, a in d.get("auc", {}).items()
            },
        )
        report.validate()
        return report

    def validate(self) -> None:
        cm = self.confusion
        n = cm.total
        if n < 1:
            raise InputError("evaluation report covers no samples")
        if abs(self.accuracy - float(np.trace(cm.counts)) / n) > 1e-9:
            raise InputError("accuracy does not equal trace(confusion)/N")
        for i, m in enumerate(self.per_class):
            row = int(cm.counts[i].sum())
            if m.support != row:
                raise InputError(f"class {i} support {m.support} != row sum {row}")
            if row > 0:
                recall = int(cm.counts[i, i]) / row
                if abs(m.recall - recall) > 1e-9:
                    raise InputError(f"class {i} recall inconsistent with confusion matrix")
        for c, a in self.auc.items():
            if a is not None and not (0.0 <= a <= 1.0):
                raise InputError(f"AUC for class {c} outside [0, 1]")


def confusion(y_true, y_pred, num_classes: int) -> ConfusionMatrix:
    """Count matrix with cell[t][p] = #(truth t predicted p)."""
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise InputError(f"length mismatch: {t.size} truths vs {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def prf_accuracy(cm: ConfusionMatrix, label_names: Optional[Tuple[str, ...]] = None) -> EvalReport:
    """Per-class one-vs-rest precision/recall/F1 plus macro averages and
    multiclass accuracy, straight from the confusion matrix."""
    n = cm.total
    if n < 1:
        raise InputError("confusion matrix is empty")
    counts = cm.counts
    num_classes = cm.num_classes
    if label_names is None:
        label_names = tuple(f"class{i}" for i in range(num_classes))

    per_class: List[ClassMetrics] = []
    for c in range(num_classes):
        tp = int(counts[c, c])
        fn = int(counts[c].sum()) - tp
        fp = int(counts[:, c].sum()) - tp
        support = tp + fn
        degenerate = False
        if tp + fp > 0:
            precision = tp / (tp + fp)
        else:
            precision, degenerate = 0.0, True
        if tp + fn > 0:
            recall = tp / (tp + fn)
        else:
            recall, degenerate = 0.0, True
        if 2 * tp + fn + fp > 0:
            f1 = 2 * tp / (2 * tp + fn + fp)
        else:
            f1, degenerate = 0.0, True
        per_class.append(ClassMetrics(precision, recall, f1, support, degenerate))

    return EvalReport(
        confusion=cm,
        per_class=per_class,
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
        accuracy=float(np.trace(counts)) / n,
        label_names=tuple(label_names),
    )


def binary_class_accuracy(cm: ConfusionMatrix, c: int) -> float:
    """One-vs-rest (TP+TN)/N for class c; distinct from multiclass accuracy."""
    counts = cm.counts
    tp = int(counts[c, c])
    fn = int(counts[c].sum()) - tp
    fp = int(counts[:, c].sum()) - tp
    tn = cm.total - tp - fn - fp
    return (tp + tn) / cm.total


def roc_auc(scores, y_true, positive_class: int) -> Tuple[List[Tuple[float, float]], float]:
    """One-vs-rest ROC points and trapezoidal AUC for one class.

    Thresholds sweep the distinct scores with ties grouped, producing
    points from (1,1) down to (0,0); the area equals the rank statistic
    (concordant pairs + half the tied pairs) / (positives * negatives).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    if s.shape != t.shape:
        raise InputError(f"length mismatch: {s.size} scores vs {t.size} labels")
    positive = t == positive_class
    n_pos = int(positive.sum())
    n_neg = int(s.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InputError(
            f"ROC for class {positive_class} needs at least one positive and one "
            f"negative sample"
        )

    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    sorted_pos = positive[order]
    points: List[Tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_pos[i:j].sum())
        fp += (j - i) - int(sorted_pos[i:j].sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    # trapezoid over the (0,0) -> (1,1) sweep
    area = 0.0
    for (f0, t0), (f1, t1) in zip(points, points[1:]):
        area += (f1 - f0) * (t0 + t1) / 2.0
    points.reverse()  # reported from (1,1) down to (0,0)
    return points, float(area)


def full_report(y_true, y_pred, scores, label_names: Tuple[str, ...]) -> EvalReport:
    """Complete report from truths, argmax predictions, and per-class scores
    ([N x C]); ROC is skipped (flagged None) for classes without both a
    positive and a negative sample."""
    num_classes = len(label_names)
    report = prf_accuracy(confusion(y_true, y_pred, num_classes), label_names)
    score_mat = np.asarray(scores, dtype=np.float64)
    for c in range(num_classes):
        try:
            points, area = roc_auc(score_mat[:, c], y_true, c)
        except InputError:
            report.roc[c] = []
            report.auc[c] = None
            continue
        report.roc[c] = points
        report.auc[c] = area
    return report
