"""Decision fusion over several models' probability outputs.

``argmax_concat`` concatenates the k member vectors of a sample into one
vector of length k*C and takes the class of its single largest entry
(max-confidence voting). ``plurality`` counts each member's argmax vote.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .archive import ExperimentArchive
from .dataset import FoldPlan
from .errors import AlignmentError, CompletenessError, DataError
from .metrics import METRIC_NAMES, MetricsReport, average_over_folds, confusion_from_probs, macro_report
from .probs import ProbabilityMatrix

MODES = ("argmax_concat", "plurality")


def fuse_argmax(vectors: Sequence[Sequence[float]], n_classes: int) -> int:
    """Class of the highest probability across all member vectors.

    Ties go to the earliest member, then the lowest class index.

    >>> fuse_argmax([[0.1, 0.2, 0.6, 0.1], [0.4, 0.3, 0.2, 0.1]], 4)
    2
    """
    if any(len(v) != n_classes for v in vectors):
        raise DataError(f"every member vector must have length {n_classes}")
    if not len(vectors):
        raise DataError("at least one member vector is required")
    flat = np.concatenate([np.asarray(v, dtype=np.float64) for v in vectors])
    return int(np.argmax(flat)) % n_classes


def _argmax_concat_rows(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # stack: (k, N, C) -> per-row concatenation (N, k*C), member-major
    k, n, c = stack.shape
    flat = stack.transpose(1, 0, 2).reshape(n, k * c)
    pos = np.argmax(flat, axis=1)
    return pos % c, pos // c


def plurality_vote(rows: np.ndarray) -> tuple[int, int]:
    """Vote over one sample's ``(k, C)`` member rows; returns ``(class, deciding member)``.

    Each member votes for its argmax. Among classes with the most votes the
    one backed by the highest single voter confidence wins, then the lowest
    class index.
    """
    votes = np.argmax(rows, axis=1)
    tally = np.bincount(votes, minlength=rows.shape[1])
    tied = np.flatnonzero(tally == tally.max())
    best_cls, best_conf, best_member = -1, -np.inf, -1
    for cls in tied:
        voters = np.flatnonzero(votes == cls)
        confs = rows[voters, cls]
        j = int(np.argmax(confs))
        if confs[j] > best_conf:
            best_cls, best_conf, best_member = int(cls), confs[j], int(voters[j])
    return best_cls, best_member


@dataclass(frozen=True)
class FusionInput:
    members: tuple[tuple[str, ProbabilityMatrix], ...]
    mode: str = "argmax_concat"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        minimum = 2 if self.mode == "plurality" else 1
        if len(self.members) < minimum:
            raise DataError(f"{self.mode} fusion needs at least {minimum} member(s)")
        ref = self.members[0][1]
        for mid, pm in self.members:
            pm.check_simplex()
            if pm.fold_id != ref.fold_id:
                raise AlignmentError(f"member {mid!r} is fold {pm.fold_id}, expected fold {ref.fold_id}")
            if pm.n_classes != ref.n_classes:
                raise AlignmentError(f"member {mid!r} has {pm.n_classes} classes, expected {ref.n_classes}")
            if pm.sample_ids != ref.sample_ids:
                first = next(
                    (i for i, (a, b) in enumerate(zip(pm.sample_ids, ref.sample_ids)) if a != b),
                    min(len(pm.sample_ids), len(ref.sample_ids)),
                )
                got = pm.sample_ids[first] if first < len(pm.sample_ids) else "<end>"
                raise AlignmentError(f"member {mid!r} diverges at row {first}: sample id {got!r}")
            if not np.array_equal(pm.true_labels, ref.true_labels):
                raise AlignmentError(f"member {mid!r} disagrees on true labels")


@dataclass(frozen=True, eq=False)
class PredictionVector:
    sample_ids: tuple[str, ...]
    predicted: np.ndarray
    provenance: tuple[str, ...]
    true_labels: np.ndarray
    votes: np.ndarray  # (N, k) per-member argmax classes

    def __len__(self):
        return len(self.sample_ids)

    def as_matrix(self, model_id: str, fold_id: int, n_classes: int) -> ProbabilityMatrix:
        """One-hot matrix of the fused decisions, for reuse by the metrics module."""
        probs = np.zeros((len(self), n_classes))
        probs[np.arange(len(self)), self.predicted] = 1.0
        return ProbabilityMatrix(model_id, fold_id, self.sample_ids, probs, self.true_labels)


def fuse_matrix(inp: FusionInput) -> PredictionVector:
    ids = [m for m, _ in inp.members]
    stack = np.stack([pm.probs for _, pm in inp.members])
    ref = inp.members[0][1]
    votes = np.argmax(stack, axis=2).T
    if inp.mode == "argmax_concat":
        predicted, winner = _argmax_concat_rows(stack)
    else:
        predicted = np.empty(len(ref), dtype=np.int64)
        winner = np.empty(len(ref), dtype=np.int64)
        for i in range(len(ref)):
            predicted[i], winner[i] = plurality_vote(stack[:, i, :])
    return PredictionVector(
        ref.sample_ids,
        predicted.astype(np.int64),
        tuple(ids[w] for w in winner),
        ref.true_labels,
        votes,
    )


@dataclass(frozen=True)
class ComboResult:
    member_ids: tuple[str, ...]
    report: MetricsReport
    per_fold: tuple[MetricsReport, ...] = ()


def fusion_report(member_ids, mode, per_fold: Sequence[MetricsReport], averaged: MetricsReport,
                  predictions: Sequence[PredictionVector] = ()) -> dict:
    """JSON-ready record of one fused ensemble."""
    return {
        "members": list(member_ids),
        "mode": mode,
        "per_fold_reports": [r.to_dict() for r in per_fold],
        "averaged_report": averaged.to_dict(),
        "per_sample": [
            {"id": sid, "fold": fold, "votes": [int(v) for v in votes], "decision": int(d), "provenance": prov}
            for fold, pv in enumerate(predictions)
            for sid, votes, d, prov in zip(pv.sample_ids, pv.votes, pv.predicted, pv.provenance)
        ],
    }


def ensemble_name(member_ids: Sequence[str]) -> str:
    return "+".join(member_ids)


def fuse_fold(member_ids: Sequence[str], archive: ExperimentArchive, fold: int, mode: str) -> PredictionVector:
    members = tuple((m, archive.probability_matrix(m, fold)) for m in member_ids)
    return fuse_matrix(FusionInput(members, mode))


def evaluate_ensemble(
    member_ids: Sequence[str],
    archive: ExperimentArchive,
    plan: FoldPlan | None = None,
    mode: str = "argmax_concat",
    class_names: Sequence[str] | None = None,
    return_predictions: bool = False,
):
    """Fuse, tally and macro-score every fold, then average over folds.

    ``plan`` fixes the fold count (and, when its test ids are present, the
    expected row order); without it the archive's complete folds are used.
    """
    member_ids = tuple(member_ids)
    folds = range(plan.n_folds) if plan is not None else archive.folds(member_ids[0])
    folds = list(folds)
    if not folds:
        raise CompletenessError(f"no folds available for {member_ids[0]!r}")
    archive.require(member_ids, folds)
    names = class_names or archive.class_names
    if names is None:
        names = [str(c) for c in range(archive.probability_matrix(member_ids[0], folds[0]).n_classes)]
    label = ensemble_name(member_ids)
    reports, predictions = [], []
    for k in folds:
        pv = fuse_fold(member_ids, archive, k, mode)
        if plan is not None and pv.sample_ids != tuple(plan.test_ids(k)):
            raise AlignmentError(f"fold {k} matrices are not ordered by the fold plan's test ids")
        pm = pv.as_matrix(label, k, len(names))
        reports.append(macro_report(confusion_from_probs(pm, names), k, label))
        predictions.append(pv)
    result = ComboResult(member_ids, average_over_folds(reports), tuple(reports))
    if return_predictions:
        return result, predictions
    return result


def _rank(results: list[ComboResult], rank_by: str) -> list[ComboResult]:
    return sorted(results, key=lambda r: -r.report.metric(rank_by))


def combo_search(
    candidate_ids: Sequence[str],
    archive: ExperimentArchive,
    plan: FoldPlan | None = None,
    rank_by: str = "accuracy",
    *,
    exhaustive: bool = False,
    top_k: int = 5,
    mode: str = "argmax_concat",
    class_names: Sequence[str] | None = None,
) -> list[ComboResult]:
    """Evaluate member combinations and rank them, best first.

    By default the candidates are ranked as single models and the nested
    prefixes of the best ``top_k`` are fused: {top_k}, ..., {top_2}. With
    ``exhaustive=True`` every subset of two or more candidates is fused.
    """
    if rank_by not in METRIC_NAMES:
        raise ValueError(f"unknown metric {rank_by!r}; expected one of {METRIC_NAMES}")
    candidate_ids = list(dict.fromkeys(candidate_ids))
    if len(candidate_ids) < 2:
        raise ValueError("combo_search needs at least two candidates")

    def run(ids):
        return evaluate_ensemble(ids, archive, plan, mode=mode, class_names=class_names)

    if exhaustive:
        combos = [c for size in range(2, len(candidate_ids) + 1) for c in itertools.combinations(candidate_ids, size)]
    else:
        singles = _rank([evaluate_ensemble((m,), archive, plan, class_names=class_names) for m in candidate_ids], rank_by)
        top = [r.member_ids[0] for r in singles[:top_k]]
        combos = [tuple(top[:size]) for size in range(len(top), 1, -1)]
    return _rank([run(c) for c in combos], rank_by)
