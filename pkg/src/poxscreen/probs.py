"""Per-sample class-probability matrices and their ``probs.csv`` codec.

File format (exact): UTF-8, LF line endings, header
``sample_id,true_label,p_0,...,p_{C-1}``, one row per test sample with the
true class index and each probability written with 8 significant digits
(``%.7e``). Writing a matrix read back from a file reproduces the file
byte for byte.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

SIMPLEX_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class ProbabilityMatrix:
    model_id: str
    fold_id: int
    sample_ids: tuple[str, ...]
    probs: np.ndarray
    true_labels: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.true_labels, dtype=np.int64)
        if probs.ndim != 2:
            raise DataError(f"probs must be 2-D, got shape {probs.shape}")
        if len(self.sample_ids) != probs.shape[0] or labels.shape != (probs.shape[0],):
            raise DataError("sample_ids, probs rows and true_labels must have equal length")
        if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise DataError("true_labels out of range for the class count")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "true_labels", labels)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self):
        return self.probs.shape[0]

    def check_finite(self) -> None:
        bad = ~np.isfinite(self.probs).all(axis=1)
        if bad.any():
            sid = self.sample_ids[int(np.flatnonzero(bad)[0])]
            raise DataError(f"non-finite probabilities for sample {sid!r} ({self.model_id}, fold {self.fold_id})")

    def check_simplex(self, tol: float = SIMPLEX_TOL) -> None:
        self.check_finite()
        if (self.probs < -tol).any() or (self.probs > 1 + tol).any():
            raise DataError(f"probabilities outside [0, 1] in {self.model_id}, fold {self.fold_id}")
        dev = np.abs(self.probs.sum(axis=1) - 1.0)
        if (dev > tol).any():
            sid = self.sample_ids[int(np.argmax(dev))]
            raise DataError(f"row for sample {sid!r} sums to {self.probs.sum(axis=1)[np.argmax(dev)]:.8f}, not 1")

    def predicted(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.probs, axis=1)

    def equals(self, other: "ProbabilityMatrix") -> bool:
        return (
            self.model_id == other.model_id
            and self.fold_id == other.fold_id
            and self.sample_ids == other.sample_ids
            and np.array_equal(self.probs, other.probs)
            and np.array_equal(self.true_labels, other.true_labels)
        )


def format_prob(p: float) -> str:
    return "%.7e" % p


def dumps_probs(pm: ProbabilityMatrix) -> str:
    pm.check_finite()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "true_label"] + [f"p_{c}" for c in range(pm.n_classes)])
    for sid, label, row in zip(pm.sample_ids, pm.true_labels, pm.probs):
        writer.writerow([sid, int(label)] + [format_prob(p) for p in row])
    return buf.getvalue()


def loads_probs(text: str, model_id: str = "", fold_id: int = 0) -> ProbabilityMatrix:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty probs.csv") from None
    n_classes = len(header) - 2
    expected = ["sample_id", "true_label"] + [f"p_{c}" for c in range(n_classes)]
    if n_classes < 1 or header != expected:
        raise DataError(f"unexpected probs.csv header: {header}")
    ids, labels, rows = [], [], []
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataError(f"probs.csv line {line_no}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        labels.append(int(row[1]))
        rows.append([float(v) for v in row[2:]])
    probs = np.array(rows, dtype=np.float64).reshape(len(rows), n_classes)
    return ProbabilityMatrix(model_id, fold_id, tuple(ids), probs, np.array(labels, dtype=np.int64))


def write_probs_csv(pm: ProbabilityMatrix, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_probs(pm))


def read_probs_csv(path: str | os.PathLike, model_id: str = "", fold_id: int = 0) -> ProbabilityMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_probs(fh.read(), model_id, fold_id)


def from_predictions(model_id: str, fold_id: int, sample_ids: Sequence[str], probs, true_labels) -> ProbabilityMatrix:
    return ProbabilityMatrix(model_id, fold_id, tuple(sample_ids), np.asarray(probs), np.asarray(true_labels))
