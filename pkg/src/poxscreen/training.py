"""Fine-tuning on one fold, probability export, and the resumable multi-cell experiment."""

from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .archive import ExperimentArchive, TrainingHistory, digest
from .backbones import HeadConfig, ModelHandle, build_model, get_backbone, keras
from .dataset import AugmentationConfig, DatasetIndex, FoldPlan, ImageRecord, augmentation_stream
from .errors import FoldPlanError, IntegrityError, OutOfMemoryError, TrainingDivergedError
from .probs import ProbabilityMatrix

logger = logging.getLogger(__name__)

# monitor name -> (history series, direction of improvement)
MONITORS = {"val_loss": ("test_loss", "min"), "val_accuracy": ("test_accuracy", "max")}


@dataclass(frozen=True)
class FineTuneConfig:
    optimizer: str = "adam"
    initial_lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    lr_decay: float = 0.95
    early_stop_patience: int = 10
    early_stop_monitor: str = "val_loss"
    seed: int = 0
    image_size: tuple[int, int] = (150, 150)
    weights: str | None = "imagenet"
    freeze_backbone: bool = False
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs and early_stop_patience must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.early_stop_monitor not in MONITORS:
            raise ValueError(f"early_stop_monitor must be one of {list(MONITORS)}")
        object.__setattr__(self, "image_size", tuple(self.image_size))

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay ** epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneConfig":
        d = dict(d)
        if "augmentation" in d and isinstance(d["augmentation"], dict):
            d["augmentation"] = AugmentationConfig(**d["augmentation"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def train_config_digest(backbone_id: str, head: HeadConfig, cfg: FineTuneConfig) -> str:
    return digest({"backbone_id": backbone_id, "head_config": head.to_dict(), "train_config": cfg.to_dict()})


class ModelArtifact:
    """A saved model directory: ``model.keras`` plus a ``meta.json`` sidecar."""

    def __init__(self, path: str | Path, meta: dict | None = None, model: keras.Model | None = None):
        self.path = Path(path)
        self.meta = meta if meta is not None else json.loads((self.path / "meta.json").read_text(encoding="utf-8"))
        self._model = model

    @property
    def backbone_id(self) -> str:
        return self.meta["backbone_id"]

    @property
    def n_classes(self) -> int:
        return self.meta["head_config"]["n_classes"]

    @property
    def class_names(self) -> list[str] | None:
        return self.meta.get("class_names")

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.meta["train_config"]["image_size"])

    @property
    def model(self) -> keras.Model:
        if self._model is None:
            self._model = keras.models.load_model(self.path / "model.keras", compile=False)
        return self._model

    def verify(self) -> None:
        cfg = FineTuneConfig.from_dict(self.meta["train_config"])
        expected = train_config_digest(self.backbone_id, HeadConfig(**self.meta["head_config"]), cfg)
        if expected != self.meta["train_config_digest"]:
            raise IntegrityError(f"artifact {self.path} sidecar digest does not match its recorded configuration")
        if not self.model.name.startswith(self.backbone_id + "_"):
            raise IntegrityError(f"artifact {self.path} holds {self.model.name!r}, sidecar says {self.backbone_id!r}")
        if self.model.output_shape[-1] != self.n_classes:
            raise IntegrityError(
                f"artifact {self.path} outputs {self.model.output_shape[-1]} classes, sidecar says {self.n_classes}"
            )

    @classmethod
    def save(cls, model: keras.Model, path: str | Path, meta: dict) -> "ModelArtifact":
        path = Path(path)
        if path.exists():
            shutil.rmtree(path)
        path.mkdir(parents=True)
        model.save(path / "model.keras")
        (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return cls(path, meta, model)


def _crossentropy(y_true: np.ndarray, probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-7, 1 - 1e-7)
    return -(y_true * np.log(p)).sum(axis=1)


def evaluate(model: keras.Model, records: Sequence[ImageRecord], cfg: FineTuneConfig, n_classes: int):
    """Loss, accuracy and probabilities on un-augmented (resize + rescale only) images."""
    probs, onehots = [], []
    for x, y in augmentation_stream(records, cfg.augmentation, cfg.image_size, cfg.batch_size,
                                    n_classes=n_classes, shuffle=False, augment=False):
        probs.append(np.asarray(model(x, training=False), dtype=np.float64))
        onehots.append(y)
    probs, onehots = np.concatenate(probs), np.concatenate(onehots)
    loss = float(_crossentropy(onehots, probs).mean())
    acc = float((probs.argmax(1) == onehots.argmax(1)).mean())
    return loss, acc, probs


def fit(
    handle: ModelHandle,
    train: Sequence[ImageRecord],
    test: Sequence[ImageRecord],
    cfg: FineTuneConfig,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainingHistory:
    """Adam + per-epoch exponential lr decay + early stopping on the test split.

    The weights of the best monitored epoch are restored before returning.
    """
    model, n_classes = handle.model, handle.head.n_classes
    model.compile(
        optimizer=keras.optimizers.Adam(learning_rate=cfg.initial_lr),
        loss="categorical_crossentropy",
        metrics=["categorical_accuracy"],
    )
    history = TrainingHistory()
    key, mode = MONITORS[cfg.early_stop_monitor]
    best_value, best_weights, since_best = None, None, 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        model.optimizer.learning_rate.assign(lr)
        # metrics accumulate across train_on_batch calls until reset: the last logs are epoch means
        model.reset_metrics()
        logs = None
        try:
            for x, y in augmentation_stream(train, cfg.augmentation, cfg.image_size, cfg.batch_size,
                                            seed=cfg.seed, n_classes=n_classes, epoch=epoch):
                logs = model.train_on_batch(x, y, return_dict=True)
                if not math.isfinite(float(logs["loss"])):
                    raise TrainingDivergedError(f"non-finite training loss at epoch {epoch} (lr={lr:.3g})")
            test_loss, test_acc, _ = evaluate(model, test, cfg, n_classes)
        except Exception as exc:
            if type(exc).__name__ == "ResourceExhaustedError":
                raise OutOfMemoryError(
                    f"out of memory at epoch {epoch} with batch_size={cfg.batch_size}; retry with a smaller batch size"
                ) from exc
            raise
        if logs is None:
            raise TrainingDivergedError(f"no decodable training images at epoch {epoch}")
        if not math.isfinite(test_loss):
            raise TrainingDivergedError(f"non-finite test loss at epoch {epoch} (lr={lr:.3g})")
        history.train_loss.append(float(logs["loss"]))
        history.train_accuracy.append(float(logs["categorical_accuracy"]))
        history.test_loss.append(test_loss)
        history.test_accuracy.append(test_acc)
        history.lr_schedule.append(lr)
        history.stopped_epoch = epoch + 1
        value = getattr(history, key)[-1]
        improved = best_value is None or (value < best_value if mode == "min" else value > best_value)
        if improved:
            best_value, best_weights, since_best = value, model.get_weights(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
        if progress:
            progress(epoch, {k: getattr(history, k)[-1] for k in ("train_loss", "train_accuracy", "test_loss", "test_accuracy")})
        logger.info("epoch %d lr=%.3g train_loss=%.4f test_loss=%.4f test_acc=%.4f",
                    epoch, lr, history.train_loss[-1], test_loss, test_acc)
        if since_best >= cfg.early_stop_patience:
            break
    model.set_weights(best_weights)
    return history


def train_fold(
    backbone_id: str,
    fold: int,
    plan: FoldPlan,
    index: DatasetIndex,
    cfg: FineTuneConfig | None = None,
    head: HeadConfig | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> tuple[ModelArtifact, TrainingHistory]:
    cfg = cfg or FineTuneConfig()
    head = head or HeadConfig(n_classes=len(index.class_vocab))
    if head.n_classes != len(index.class_vocab):
        raise IntegrityError(f"head has {head.n_classes} outputs but the corpus has {len(index.class_vocab)} classes")
    get_backbone(backbone_id)
    train, test = plan.resolve(index, fold)
    keras.utils.set_random_seed(cfg.seed)
    handle = build_model(backbone_id, head, cfg.freeze_backbone, weights=cfg.weights,
                         input_size=cfg.image_size, seed=cfg.seed)
    history = fit(handle, train, test, cfg, progress)
    meta = {
        "backbone_id": backbone_id,
        "head_config": head.to_dict(),
        "train_config": cfg.to_dict(),
        "train_config_digest": train_config_digest(backbone_id, head, cfg),
        "fold_id": fold,
        "seed": cfg.seed,
        "class_names": index.class_names,
    }
    if out_dir is None:
        out_dir = Path(tempfile.mkdtemp(prefix=f"{backbone_id}_fold{fold}_")) / "model"
    return ModelArtifact.save(handle.model, out_dir, meta), history


def predict_probs(
    artifact: ModelArtifact,
    records: Sequence[ImageRecord],
    fold_id: int,
    class_names: Sequence[str] | None = None,
    batch_size: int = 32,
) -> ProbabilityMatrix:
    """Class probabilities for ``records``, rows in the given order."""
    artifact.verify()
    if class_names is not None and len(class_names) != artifact.n_classes:
        raise IntegrityError(
            f"model was trained for {artifact.n_classes} classes but {len(class_names)} class names were given"
        )
    cfg = FineTuneConfig.from_dict(artifact.meta["train_config"])
    rows = []
    for x, _ in augmentation_stream(records, cfg.augmentation, cfg.image_size, batch_size,
                                    n_classes=artifact.n_classes, shuffle=False, augment=False):
        rows.append(np.asarray(artifact.model(x, training=False), dtype=np.float64))
    probs = np.concatenate(rows)
    if len(probs) != len(records):
        raise IntegrityError(f"{len(records) - len(probs)} test image(s) could not be decoded")
    pm = ProbabilityMatrix(
        artifact.backbone_id, fold_id, tuple(r.record_id for r in records),
        probs, np.array([r.label.id for r in records]),
    )
    pm.check_simplex()
    return pm


def cell_digest(backbone_id: str, fold: int, plan: FoldPlan, head: HeadConfig, cfg: FineTuneConfig) -> str:
    return digest({
        "train": train_config_digest(backbone_id, head, cfg),
        "fold": fold,
        "train_ids": plan.train_ids(fold),
        "test_ids": plan.test_ids(fold),
    })


def run_experiment(
    backbone_ids: Sequence[str],
    plan: FoldPlan,
    index: DatasetIndex,
    cfg: FineTuneConfig | None = None,
    out_dir: str | Path = "experiment",
    head: HeadConfig | None = None,
    folds: Sequence[int] | None = None,
    progress: Callable[[str, int, int, dict], None] | None = None,
) -> ExperimentArchive:
    """Train and export every (backbone, fold) cell into an archive.

    Cells already recorded as complete with a matching digest are skipped.
    A failing cell is recorded as failed in the manifest and the remaining
    cells still run.
    """
    cfg = cfg or FineTuneConfig()
    head = head or HeadConfig(n_classes=len(index.class_vocab))
    for b in backbone_ids:
        get_backbone(b)
    folds = list(range(plan.n_folds) if folds is None else folds)
    archive = ExperimentArchive(out_dir)
    archive.root.mkdir(parents=True, exist_ok=True)
    plan.save(archive.root / "fold_plan.json")
    archive.update_manifest(class_names=index.class_names, n_folds=plan.n_folds, fold_plan_seed=plan.seed)
    for b in backbone_ids:
        for k in folds:
            d = cell_digest(b, k, plan, head, cfg)
            if archive.is_complete(b, k, d):
                logger.info("skipping complete cell %s/fold%d", b, k)
                continue
            try:
                artifact, history = train_fold(
                    b, k, plan, index, cfg, head, archive.model_dir(b, k),
                    progress=(lambda e, m, b=b, k=k: progress(b, k, e, m)) if progress else None,
                )
                _, test = plan.resolve(index, k)
                pm = predict_probs(artifact, test, k, index.class_names)
                if set(pm.sample_ids) & set(plan.train_ids(k)):
                    raise FoldPlanError(f"test leakage in {b}/fold{k}")
                archive.write_history(b, k, history)
                archive.write_probs(pm)
                archive.record_cell(b, k, "complete", d)
            except Exception as exc:
                logger.exception("cell %s/fold%d failed", b, k)
                archive.record_cell(b, k, "failed", d, f"{type(exc).__name__}: {exc}")
            finally:
                keras.backend.clear_session()
    return archive
