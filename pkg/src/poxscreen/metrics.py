"""Confusion matrices and per-class / macro Precision, Recall, F1 and Accuracy.

Internal values are fractions in [0, 1]; percentages are a rendering concern.
A ratio whose denominator is zero evaluates to 0 and the class name is
recorded in ``MetricsReport.undefined``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, UndefinedMetricError
from .probs import ProbabilityMatrix

METRIC_NAMES = ("precision", "recall", "f1", "accuracy")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {counts.shape}")
        if counts.shape[0] != len(self.class_names):
            raise DataError("class_names length does not match the matrix size")
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, true, pred, class_names: Sequence[str]) -> "ConfusionMatrix":
        n = len(class_names)
        counts = np.zeros((n, n), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts, tuple(class_names))


@dataclass(frozen=True)
class ClassCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {"P": self.precision, "R": self.recall, "F": self.f1}


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, PRF]
    macro: PRF
    accuracy: float
    fold_id: int | str
    n_samples: int
    model: str = ""
    n_folds: int = 1
    undefined: tuple[str, ...] = field(default=())

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(self.per_class)

    def metric(self, name: str) -> float:
        if name == "accuracy":
            return self.accuracy
        if name in ("precision", "recall", "f1"):
            return getattr(self.macro, name)
        raise ValueError(f"unknown metric {name!r}; expected one of {METRIC_NAMES}")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "fold": self.fold_id,
            "per_class": {name: prf.to_dict() for name, prf in self.per_class.items()},
            "macro": self.macro.to_dict(),
            "accuracy": self.accuracy,
            "n": self.n_samples,
            "n_folds": self.n_folds,
            "undefined": list(self.undefined),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def prf(x):
            return PRF(x["P"], x["R"], x["F"])

        return cls(
            per_class={k: prf(v) for k, v in d["per_class"].items()},
            macro=prf(d["macro"]),
            accuracy=d["accuracy"],
            fold_id=d["fold"],
            n_samples=d["n"],
            model=d.get("model", ""),
            n_folds=d.get("n_folds", 1),
            undefined=tuple(d.get("undefined", ())),
        )


def confusion_from_probs(pm: ProbabilityMatrix, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    """Argmax each row (ties to the lowest class index) and tally against the true labels."""
    pm.check_finite()
    if class_names is None:
        class_names = [str(c) for c in range(pm.n_classes)]
    if len(class_names) != pm.n_classes:
        raise DataError(f"{len(class_names)} class names for a {pm.n_classes}-class matrix")
    return ConfusionMatrix.from_labels(pm.true_labels, pm.predicted(), class_names)


def class_counts(cm: ConfusionMatrix, c: int) -> ClassCounts:
    if not 0 <= c < cm.n_classes:
        raise IndexError(f"class index {c} out of range")
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c, :].sum()) - tp
    return ClassCounts(tp, fp, fn, cm.total - tp - fp - fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def precision(counts: ClassCounts) -> float:
    return _ratio(counts.TP, counts.TP + counts.FP)


def recall(counts: ClassCounts) -> float:
    return _ratio(counts.TP, counts.TP + counts.FN)


def f1(counts: ClassCounts) -> float:
    p, r = precision(counts), recall(counts)
    return _ratio(2 * p * r, p + r)


def accuracy(cm: ConfusionMatrix) -> float:
    """Multiclass accuracy: trace over total."""
    if cm.total == 0:
        raise UndefinedMetricError("accuracy is undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def macro_report(cm: ConfusionMatrix, fold_id: int | str = 0, model: str = "") -> MetricsReport:
    acc = accuracy(cm)
    per_class, undefined = {}, []
    for c, name in enumerate(cm.class_names):
        cc = class_counts(cm, c)
        if cc.TP + cc.FP == 0 or cc.TP + cc.FN == 0 or cc.TP == 0:
            undefined.append(name)
        per_class[name] = PRF(precision(cc), recall(cc), f1(cc))
    n = len(per_class)
    macro = PRF(
        sum(v.precision for v in per_class.values()) / n,
        sum(v.recall for v in per_class.values()) / n,
        sum(v.f1 for v in per_class.values()) / n,
    )
    return MetricsReport(per_class, macro, acc, fold_id, cm.total, model, 1, tuple(undefined))


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs)


def average_over_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean of every metric across folds.

    ``n_samples`` becomes the total number of evaluated samples and
    ``n_folds`` the number of reports averaged.
    """
    if not reports:
        raise ValueError("reports must be non-empty")
    names = reports[0].class_names
    if any(r.class_names != names for r in reports):
        raise DataError("cannot average reports with different class vocabularies")
    per_class = {
        name: PRF(
            _mean(r.per_class[name].precision for r in reports),
            _mean(r.per_class[name].recall for r in reports),
            _mean(r.per_class[name].f1 for r in reports),
        )
        for name in names
    }
    macro = PRF(
        _mean(r.macro.precision for r in reports),
        _mean(r.macro.recall for r in reports),
        _mean(r.macro.f1 for r in reports),
    )
    undefined = tuple(sorted({u for r in reports for u in r.undefined}))
    return MetricsReport(
        per_class,
        macro,
        _mean(r.accuracy for r in reports),
        "averaged",
        sum(r.n_samples for r in reports),
        reports[0].model,
        sum(r.n_folds for r in reports),
        undefined,
    )


def report_from_probs(pm: ProbabilityMatrix, class_names: Sequence[str] | None = None) -> MetricsReport:
    return macro_report(confusion_from_probs(pm, class_names), pm.fold_id, pm.model_id)
