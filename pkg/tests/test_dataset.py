import json

import numpy as np
import pytest
from PIL import Image

from conftest import FULL_COUNTS, write_corpus
from poxscreen.dataset import (
    AugmentationConfig,
    DatasetIndex,
    FoldPlan,
    augmentation_stream,
    load_dataset,
    make_fold_plan,
    random_transform,
)
from poxscreen.errors import DatasetStructureError, FoldPlanError


class TestLoadDataset:
    def test_full_counts(self, tmp_path):
        root = write_corpus(tmp_path / "c", FULL_COUNTS, size=(4, 4))
        index = load_dataset(root)
        assert index.counts_by_name() == FULL_COUNTS
        assert len(index) == 1754
        assert sum(index.counts) == len(index.records)

    def test_minimal_corpus(self, tmp_path):
        index = load_dataset(write_corpus(tmp_path / "c", 1))
        assert index.counts == (1, 1, 1, 1)
        assert [c.name for c in index.class_vocab] == ["Chickenpox", "Measles", "Monkeypox", "Normal"]
        assert [c.id for c in index.class_vocab] == [0, 1, 2, 3]

    def test_missing_class_named(self, tmp_path):
        root = write_corpus(tmp_path / "c", 1, names=("Chickenpox", "Measles", "Monkeypox"))
        with pytest.raises(DatasetStructureError, match="Normal"):
            load_dataset(root)

    def test_corrupt_file_rejected_not_fatal(self, tmp_path):
        root = write_corpus(tmp_path / "c", 2)
        (root / "Measles" / "broken.jpg").write_bytes(b"not an image")
        index = load_dataset(root)
        assert index.counts == (2, 2, 2, 2)
        assert len(index.rejected) == 1 and index.rejected[0].path.endswith("broken.jpg")

    def test_unknown_folder_ignored(self, tmp_path, caplog):
        root = write_corpus(tmp_path / "c", 1)
        (root / "Smallpox").mkdir()
        index = load_dataset(root)
        assert len(index) == 4
        assert "Smallpox" in caplog.text

    def test_deterministic_order(self, tmp_path):
        root = write_corpus(tmp_path / "c", 3)
        ids = [r.record_id for r in load_dataset(root).records]
        assert ids == sorted(ids)


def full_index():
    return DatasetIndex.from_counts(FULL_COUNTS)


class TestFoldPlan:
    def test_full_fold_sizes(self):
        # floor(0.7 * n) per class in exact integer arithmetic
        expected_train = [n * 7 // 10 for n in FULL_COUNTS.values()]
        assert expected_train == [230, 200, 410, 386]
        plan = make_fold_plan(full_index(), 5, 0.70, seed=42)
        for k in range(5):
            assert len(plan.train_ids(k)) == 1226 == sum(expected_train)
            assert len(plan.test_ids(k)) == 528

    def test_symmetric_split(self):
        index = DatasetIndex.from_counts([10, 10, 10, 10])
        plan = make_fold_plan(index, 3, 0.5, seed=1)
        for k in range(3):
            train, test = plan.resolve(index, k)
            assert np.bincount([r.label.id for r in train]).tolist() == [5] * 4
            assert np.bincount([r.label.id for r in test]).tolist() == [5] * 4

    def test_deterministic_bytes(self):
        a = make_fold_plan(full_index(), 5, 0.7, 42).to_json()
        b = make_fold_plan(full_index(), 5, 0.7, 42).to_json()
        assert a == b
        assert make_fold_plan(full_index(), 5, 0.7, 43).to_json() != a

    def test_folds_differ(self):
        plan = make_fold_plan(full_index(), 5, 0.7, 42)
        assert len({plan.test_ids(k) for k in range(5)}) == 5

    def test_round_trip(self, tmp_path):
        index = full_index()
        plan = make_fold_plan(index, 5, 0.7, 7)
        plan.save(tmp_path / "plan.json")
        again = FoldPlan.load(tmp_path / "plan.json")
        assert again == plan
        d = json.loads((tmp_path / "plan.json").read_text())
        assert set(d) == {"seed", "n_folds", "train_fraction", "folds"}
        assert set(d["folds"][0]) == {"train", "test"}
        for k in range(5):
            tr, te = again.resolve(index, k)
            assert {r.record_id for r in tr} == set(plan.train_ids(k))

    def test_singleton_class_rejected(self):
        with pytest.raises(FoldPlanError, match="Measles"):
            make_fold_plan(DatasetIndex.from_counts([5, 1, 5, 5]))

    def test_empty_stratum(self):
        with pytest.raises(FoldPlanError, match="empty train"):
            make_fold_plan(DatasetIndex.from_counts([2, 2, 2, 20]), train_fraction=0.3)
        with pytest.raises(FoldPlanError, match="empty test"):
            make_fold_plan(DatasetIndex.from_counts([2, 2, 2, 2]), train_fraction=0.9999999)

    def test_bad_fraction(self):
        with pytest.raises(FoldPlanError):
            make_fold_plan(full_index(), train_fraction=1.0)

    def test_unknown_record(self):
        plan = make_fold_plan(full_index(), 1)
        with pytest.raises(FoldPlanError):
            plan.resolve(DatasetIndex.from_counts([3, 3, 3, 3]), 0)


class TestAugmentation:
    def test_identity_config_is_resize_and_rescale(self, tiny_corpus):
        index = load_dataset(tiny_corpus)
        recs = list(index.records[:4])
        x, y = next(augmentation_stream(recs, AugmentationConfig.identity(), (24, 24), 4, seed=0, shuffle=False))
        raw = np.stack([np.asarray(Image.open(r.source_path).convert("RGB"), dtype=np.float64) for r in recs])
        np.testing.assert_allclose(x, raw / 255, rtol=1e-6)
        assert y.shape == (4, 4) and (y.sum(axis=1) == 1).all()

    def test_output_shape_and_range(self, tiny_corpus):
        index = load_dataset(tiny_corpus)
        x, y = next(augmentation_stream(list(index.records), AugmentationConfig(), (150, 150), 16, seed=0))
        assert x.shape == (16, 150, 150, 3) and x.dtype == np.float32
        assert x.min() >= 0 and x.max() <= 1 + 1e-6

    def test_remainder_batch(self, tmp_path):
        index = load_dataset(write_corpus(tmp_path / "c", {"Chickenpox": 9, "Measles": 8, "Monkeypox": 8, "Normal": 8}, size=(8, 8)))
        sizes = [len(b[0]) for b in augmentation_stream(list(index.records), AugmentationConfig(), (8, 8), 16, seed=0)]
        assert sizes == [16, 16, 1]

    def test_seeded_replay_and_fresh_epochs(self, tiny_corpus):
        recs = list(load_dataset(tiny_corpus).records)
        cfg = AugmentationConfig()
        a = next(augmentation_stream(recs, cfg, (32, 32), 8, seed=3))[0]
        b = next(augmentation_stream(recs, cfg, (32, 32), 8, seed=3))[0]
        c = next(augmentation_stream(recs, cfg, (32, 32), 8, seed=3, epoch=1))[0]
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_corrupt_image_skipped(self, tiny_corpus, caplog):
        recs = list(load_dataset(tiny_corpus).records[:3])
        with open(recs[1].source_path, "wb") as fh:
            fh.write(b"garbage")
        batches = list(augmentation_stream(recs, AugmentationConfig(), (24, 24), 3, seed=0, shuffle=False))
        assert len(batches[0][0]) == 2
        assert "skipping" in caplog.text

    def test_transform_changes_image(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 255, (32, 32, 3)).astype(np.float32)
        out = random_transform(x, AugmentationConfig(), np.random.default_rng(1))
        assert out.shape == x.shape and not np.allclose(out, x)
        assert out.min() >= x.min() - 1e-3 and out.max() <= x.max() + 1e-3

    def test_negative_range_rejected(self):
        with pytest.raises(ValueError):
            AugmentationConfig(rotation_range_deg=-1)
