# Corpus layout, class counts and the five random 70/30 splits.
# Run from the repository root: python3 demos/01_dataset_and_folds.py [corpus_root]
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from poxscreen.dataset import AugmentationConfig, DatasetIndex, augmentation_stream, load_dataset, make_fold_plan

# %% the corpus is one folder per class; without a real one we paint a tiny stand-in
if len(sys.argv) > 1:
    root = Path(sys.argv[1])
else:
    root = Path(tempfile.mkdtemp()) / "corpus"
    rng = np.random.default_rng(0)
    for c, name in enumerate(["Chickenpox", "Measles", "Monkeypox", "Normal"]):
        (root / name).mkdir(parents=True)
        for i in range(10):
            img = np.clip(rng.normal(60 + 50 * c, 30, (48, 48, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(root / name / f"{i:03d}.png")

index = load_dataset(root)
print(index.counts_by_name(), "total", len(index))
print("first record:", index.records[0].record_id)

# %% folds are independent stratified splits, not a partition
plan = make_fold_plan(index, n_folds=5, train_fraction=0.70, seed=42)
for k in range(plan.n_folds):
    print(f"fold {k}: {len(plan.train_ids(k))} train, {len(plan.test_ids(k))} test")
overlap = set(plan.test_ids(0)) & set(plan.test_ids(1))
print("test ids shared by folds 0 and 1:", len(overlap))

# %% same arithmetic on the full class sizes, no images needed
full = DatasetIndex.from_counts({"Chickenpox": 329, "Measles": 286, "Monkeypox": 587, "Normal": 552})
full_plan = make_fold_plan(full, 5, 0.70, seed=42)
print("full-size corpus per fold:", len(full_plan.train_ids(0)), "/", len(full_plan.test_ids(0)))

# %% online augmentation: every epoch draws fresh transforms, a seed replays them
train, _ = plan.resolve(index, 0)
x, y = next(augmentation_stream(train, AugmentationConfig(), (150, 150), batch=8, seed=0))
print("batch", x.shape, "range", float(x.min()), float(x.max()), "labels", y.argmax(1))
