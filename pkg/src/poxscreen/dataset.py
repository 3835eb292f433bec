"""Corpus indexing, seeded train/test fold plans and the online augmentation stream."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DatasetStructureError, FoldPlanError

logger = logging.getLogger(__name__)

CLASS_NAMES = ("Chickenpox", "Measles", "Monkeypox", "Normal")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
TARGET_SIZE = (150, 150)


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str


def make_vocab(names: Sequence[str] = CLASS_NAMES) -> tuple[ClassLabel, ...]:
    if len(set(names)) != len(names):
        raise DatasetStructureError(f"duplicate class names in vocabulary: {list(names)}")
    return tuple(ClassLabel(i, n) for i, n in enumerate(names))


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    source_path: str
    label: ClassLabel


@dataclass(frozen=True)
class RejectedFile:
    path: str
    reason: str


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[ImageRecord, ...]
    class_vocab: tuple[ClassLabel, ...]
    rejected: tuple[RejectedFile, ...] = ()

    def __post_init__(self):
        ids = [r.record_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetStructureError("record_id values must be unique")
        for i, label in enumerate(self.class_vocab):
            if label.id != i:
                raise DatasetStructureError("class ids must be contiguous from 0")

    @property
    def counts(self) -> tuple[int, ...]:
        out = [0] * len(self.class_vocab)
        for r in self.records:
            out[r.label.id] += 1
        return tuple(out)

    def counts_by_name(self) -> dict[str, int]:
        return {c.name: n for c, n in zip(self.class_vocab, self.counts)}

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.class_vocab]

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.record_id: r for r in self.records}

    @classmethod
    def from_counts(cls, counts: dict[str, int] | Sequence[int], names: Sequence[str] = CLASS_NAMES):
        """Build a path-less index with the given class sizes (for planning and tests)."""
        if isinstance(counts, dict):
            names = list(counts)
            counts = list(counts.values())
        vocab = make_vocab(names)
        records = []
        for label, n in zip(vocab, counts):
            records += [ImageRecord(f"{label.name}/{i:05d}", "", label) for i in range(n)]
        return cls(tuple(records), vocab)


def _check_decodable(path: Path) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            im.convert("RGB").load()
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return None


def load_dataset(root: str | os.PathLike, vocab: Sequence[str] = CLASS_NAMES, verify: bool = True) -> DatasetIndex:
    """Index ``<root>/<ClassName>/*.{jpg,jpeg,png}``.

    Undecodable files are listed in ``DatasetIndex.rejected`` instead of
    raising. Subfolders not named in ``vocab`` are ignored with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetStructureError(f"dataset root {str(root)!r} is not a directory")
    labels = make_vocab(vocab)
    missing = [c.name for c in labels if not (root / c.name).is_dir()]
    if missing:
        raise DatasetStructureError(f"missing class directories under {str(root)!r}: {', '.join(missing)}")
    for extra in sorted(p.name for p in root.iterdir() if p.is_dir() and p.name not in vocab):
        logger.warning("ignoring unknown class folder %r", extra)

    records, rejected = [], []
    for label in labels:
        files = sorted(
            p for p in (root / label.name).iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        accepted = 0
        for path in files:
            reason = _check_decodable(path) if verify else None
            if reason is not None:
                rejected.append(RejectedFile(str(path), reason))
                continue
            records.append(ImageRecord(f"{label.name}/{path.name}", str(path), label))
            accepted += 1
        if accepted == 0:
            raise DatasetStructureError(f"class directory {label.name!r} contains no decodable images")
    records.sort(key=lambda r: r.record_id)
    return DatasetIndex(tuple(records), labels, tuple(rejected))


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    n_folds: int
    train_fraction: float
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def train_ids(self, k: int) -> tuple[str, ...]:
        return self.folds[k][0]

    def test_ids(self, k: int) -> tuple[str, ...]:
        return self.folds[k][1]

    def resolve(self, index: DatasetIndex, k: int) -> tuple[list[ImageRecord], list[ImageRecord]]:
        if not 0 <= k < self.n_folds:
            raise FoldPlanError(f"fold {k} out of range for a {self.n_folds}-fold plan")
        lookup = index.by_id()
        try:
            return [lookup[i] for i in self.folds[k][0]], [lookup[i] for i in self.folds[k][1]]
        except KeyError as exc:
            raise FoldPlanError(f"fold plan references unknown record {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_folds": self.n_folds,
            "train_fraction": self.train_fraction,
            "folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds = tuple((tuple(f["train"]), tuple(f["test"])) for f in d["folds"])
        if len(folds) != d["n_folds"]:
            raise FoldPlanError("n_folds does not match the number of stored folds")
        return cls(int(d["seed"]), int(d["n_folds"]), float(d["train_fraction"]), folds)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def stratum_train_size(n: int, train_fraction: float) -> int:
    # limit_denominator keeps 0.7 exact (7/10) so floor(0.7 * 10) is 7, not 6
    frac = Fraction(train_fraction).limit_denominator(10**6)
    return math.floor(frac * n)


def make_fold_plan(index: DatasetIndex, n_folds: int = 5, train_fraction: float = 0.70, seed: int = 42) -> FoldPlan:
    """Draw ``n_folds`` independent stratified random train/test splits.

    Each fold floors ``train_fraction * n_c`` per class for training and
    sends the remainder to test. Folds are repeated random splits, not a
    partition of the corpus.
    """
    if not 0 < train_fraction < 1:
        raise FoldPlanError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if n_folds < 1:
        raise FoldPlanError("n_folds must be >= 1")
    by_class: list[list[str]] = [[] for _ in index.class_vocab]
    for r in sorted(index.records, key=lambda r: r.record_id):
        by_class[r.label.id].append(r.record_id)
    for label, ids in zip(index.class_vocab, by_class):
        if len(ids) < 2:
            raise FoldPlanError(f"class {label.name!r} has {len(ids)} records; at least 2 are required")
        n_train = stratum_train_size(len(ids), train_fraction)
        if n_train == 0 or n_train == len(ids):
            side = "train" if n_train == 0 else "test"
            raise FoldPlanError(
                f"train_fraction {train_fraction} leaves class {label.name!r} with an empty {side} stratum"
            )

    folds = []
    for k in range(n_folds):
        rng = np.random.default_rng([seed, k])
        train, test = [], []
        for ids in by_class:
            order = rng.permutation(len(ids))
            n_train = stratum_train_size(len(ids), train_fraction)
            train += [ids[i] for i in order[:n_train]]
            test += [ids[i] for i in order[n_train:]]
        folds.append((tuple(sorted(train)), tuple(sorted(test))))
    return FoldPlan(seed, n_folds, float(train_fraction), tuple(folds))


@dataclass(frozen=True)
class AugmentationConfig:
    """Online augmentation ranges, with the same semantics as Keras'
    ``ImageDataGenerator`` (shear in degrees, channel shift in raw 0-255 units,
    geometric and colour transforms applied before rescaling)."""

    rescale: float = 1 / 255
    rotation_range_deg: float = 50.0
    width_shift_frac: float = 0.2
    height_shift_frac: float = 0.2
    shear_range: float = 0.25
    zoom_range: float = 0.1
    channel_shift_range: float = 20.0

    def __post_init__(self):
        if self.rescale <= 0:
            raise ValueError("rescale must be positive")
        for name in ("rotation_range_deg", "width_shift_frac", "height_shift_frac",
                     "shear_range", "zoom_range", "channel_shift_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def identity(cls, rescale: float = 1 / 255) -> "AugmentationConfig":
        return cls(rescale, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def load_image(path: str | os.PathLike, target_size: tuple[int, int] = TARGET_SIZE) -> np.ndarray:
    """Decode to RGB and resize; returns float32 ``(H, W, 3)`` in raw 0-255 units."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (target_size[1], target_size[0]):
            im = im.resize((target_size[1], target_size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32)


def _affine_matrix(h: int, w: int, theta: float, tx: float, ty: float, shear: float, zx: float, zy: float):
    m = np.eye(3)
    if theta:
        m = m @ np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
    if tx or ty:
        m = m @ np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]])
    if shear:
        m = m @ np.array([[1, -np.sin(shear), 0], [0, np.cos(shear), 0], [0, 0, 1]])
    if zx != 1 or zy != 1:
        m = m @ np.array([[zx, 0, 0], [0, zy, 0], [0, 0, 1]])
    if np.allclose(m, np.eye(3)):
        return None
    cx, cy = h / 2 - 0.5, w / 2 - 0.5
    to_center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]])
    from_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    return to_center @ m @ from_center


def random_transform(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one random geometric + channel-shift transform to a raw ``(H, W, 3)`` image."""
    h, w = x.shape[:2]
    theta = np.deg2rad(rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg)) if cfg.rotation_range_deg else 0.0
    tx = rng.uniform(-cfg.height_shift_frac, cfg.height_shift_frac) * h if cfg.height_shift_frac else 0.0
    ty = rng.uniform(-cfg.width_shift_frac, cfg.width_shift_frac) * w if cfg.width_shift_frac else 0.0
    shear = np.deg2rad(rng.uniform(-cfg.shear_range, cfg.shear_range)) if cfg.shear_range else 0.0
    if cfg.zoom_range:
        zx, zy = rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range, 2)
    else:
        zx = zy = 1.0
    m = _affine_matrix(h, w, theta, tx, ty, shear, zx, zy)
    out = x
    if m is not None:
        out = np.stack(
            [ndimage.affine_transform(x[..., c], m[:2, :2], m[:2, 2], order=1, mode="nearest") for c in range(x.shape[2])],
            axis=-1,
        )
    if cfg.channel_shift_range:
        shift = rng.uniform(-cfg.channel_shift_range, cfg.channel_shift_range)
        out = np.clip(out + shift, x.min(), x.max())
    return out.astype(np.float32, copy=False)


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def augmentation_stream(
    records: Sequence[ImageRecord],
    cfg: AugmentationConfig,
    target_size: tuple[int, int] = TARGET_SIZE,
    batch: int = 16,
    seed: int = 0,
    *,
    n_classes: int = len(CLASS_NAMES),
    epoch: int = 0,
    shuffle: bool = True,
    augment: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, one_hot_labels)`` batches for one pass over ``records``.

    Randomness (order and transforms) is drawn from a generator seeded by
    ``(seed, epoch)``, so every epoch gets fresh transforms and a fixed
    ``(seed, epoch)`` replays exactly. With ``augment=False`` images are
    only resized and rescaled. Unreadable images are skipped with a warning.
    """
    if not records:
        raise ValueError("records must be non-empty")
    if target_size[0] <= 0 or target_size[1] <= 0 or batch < 1:
        raise ValueError("target_size and batch must be positive")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(records)) if shuffle else np.arange(len(records))
    for start in range(0, len(order), batch):
        images, labels = [], []
        for i in order[start:start + batch]:
            rec = records[i]
            try:
                x = load_image(rec.source_path, target_size)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                logger.warning("skipping unreadable image %s: %s", rec.source_path, exc)
                continue
            if augment:
                x = random_transform(x, cfg, rng)
            images.append(x * np.float32(cfg.rescale))
            labels.append(rec.label.id)
        if images:
            yield np.stack(images).astype(np.float32), one_hot(labels, n_classes)
