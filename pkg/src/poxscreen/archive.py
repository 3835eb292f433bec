"""On-disk experiment archive.

Layout::

    <out>/manifest.json
    <out>/<backbone_id>/fold<k>/model/         saved model + meta.json sidecar
    <out>/<backbone_id>/fold<k>/history.json
    <out>/<backbone_id>/fold<k>/probs.csv

The manifest records one entry per (backbone, fold) cell with its status and
the digest of the inputs that produced it. Manifest updates hold a file lock
and replace the file atomically, so several training processes can share one
archive.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from filelock import FileLock

from .errors import CompletenessError
from .probs import ProbabilityMatrix, read_probs_csv, write_probs_csv

MANIFEST = "manifest.json"


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def cell_key(model_id: str, fold: int) -> str:
    return f"{model_id}/fold{fold}"


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    lr_schedule: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "lr_schedule": self.lr_schedule,
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHistory":
        return cls(**d)


class ExperimentArchive:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def cell_dir(self, model_id: str, fold: int) -> Path:
        return self.root / model_id / f"fold{fold}"

    def model_dir(self, model_id: str, fold: int) -> Path:
        return self.cell_dir(model_id, fold) / "model"

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    @contextmanager
    def _locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.root / (MANIFEST + ".lock"))):
            yield

    def read_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"cells": {}}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def _write_manifest(self, manifest: dict) -> None:
        tmp = self.manifest_path.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    def update_manifest(self, **meta) -> None:
        with self._locked():
            manifest = self.read_manifest()
            manifest.update(meta)
            self._write_manifest(manifest)

    def record_cell(self, model_id: str, fold: int, status: str, cell_digest: str, error: str | None = None) -> None:
        with self._locked():
            manifest = self.read_manifest()
            manifest.setdefault("cells", {})[cell_key(model_id, fold)] = {
                "model": model_id,
                "fold": fold,
                "status": status,
                "digest": cell_digest,
                "error": error,
            }
            self._write_manifest(manifest)

    def cell_status(self, model_id: str, fold: int) -> dict | None:
        return self.read_manifest().get("cells", {}).get(cell_key(model_id, fold))

    def is_complete(self, model_id: str, fold: int, cell_digest: str | None = None) -> bool:
        entry = self.cell_status(model_id, fold)
        if not entry or entry["status"] != "complete":
            return False
        if cell_digest is not None and entry["digest"] != cell_digest:
            return False
        return (self.cell_dir(model_id, fold) / "probs.csv").exists()

    @property
    def class_names(self) -> list[str] | None:
        return self.read_manifest().get("class_names")

    def models(self) -> list[str]:
        cells = self.read_manifest().get("cells", {}).values()
        return sorted({c["model"] for c in cells})

    def folds(self, model_id: str) -> list[int]:
        cells = self.read_manifest().get("cells", {}).values()
        return sorted(c["fold"] for c in cells if c["model"] == model_id and c["status"] == "complete")

    def write_probs(self, pm: ProbabilityMatrix) -> Path:
        d = self.cell_dir(pm.model_id, pm.fold_id)
        d.mkdir(parents=True, exist_ok=True)
        write_probs_csv(pm, d / "probs.csv")
        return d / "probs.csv"

    def write_history(self, model_id: str, fold: int, history: TrainingHistory) -> Path:
        d = self.cell_dir(model_id, fold)
        d.mkdir(parents=True, exist_ok=True)
        path = d / "history.json"
        path.write_text(json.dumps(history.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    def probability_matrix(self, model_id: str, fold: int) -> ProbabilityMatrix:
        path = self.cell_dir(model_id, fold) / "probs.csv"
        if not path.exists():
            raise CompletenessError(f"missing probability matrix for {cell_key(model_id, fold)}")
        return read_probs_csv(path, model_id, fold)

    def history(self, model_id: str, fold: int) -> TrainingHistory:
        path = self.cell_dir(model_id, fold) / "history.json"
        if not path.exists():
            raise CompletenessError(f"missing training history for {cell_key(model_id, fold)}")
        return TrainingHistory.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def missing_cells(self, model_ids: Iterable[str], folds: Iterable[int]) -> list[str]:
        folds = list(folds)
        return [
            cell_key(m, k) for m in model_ids for k in folds
            if not (self.cell_dir(m, k) / "probs.csv").exists()
        ]

    def require(self, model_ids: Iterable[str], folds: Iterable[int]) -> None:
        missing = self.missing_cells(model_ids, folds)
        if missing:
            raise CompletenessError("archive is missing cells: " + ", ".join(missing))

    def add_matrix(self, pm: ProbabilityMatrix, history: TrainingHistory | None = None, cell_digest: str = "") -> None:
        """Store an externally produced matrix as a complete cell."""
        self.write_probs(pm)
        if history is not None:
            self.write_history(pm.model_id, pm.fold_id, history)
        self.record_cell(pm.model_id, pm.fold_id, "complete", cell_digest)
