# One fold of fine-tuning end to end, shrunk so it finishes on a laptop CPU.
# Real runs use 150x150 inputs, ImageNet weights and the defaults of FineTuneConfig.
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from poxscreen.dataset import load_dataset, make_fold_plan
from poxscreen.fusion import evaluate_ensemble
from poxscreen.report import metrics_table, model_report
from poxscreen.training import FineTuneConfig, run_experiment

work = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
for c, name in enumerate(["Chickenpox", "Measles", "Monkeypox", "Normal"]):
    (work / "corpus" / name).mkdir(parents=True)
    for i in range(8):
        base = np.array([[200, 40, 40], [40, 200, 40], [40, 40, 200], [120, 120, 120]][c])
        img = np.clip(base + rng.normal(0, 25, (32, 32, 3)), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(work / "corpus" / name / f"{i}.png")

index = load_dataset(work / "corpus")
plan = make_fold_plan(index, n_folds=1, train_fraction=0.5, seed=0)
# weights=None: random init, because the ImageNet files may not be reachable offline.
# From scratch, three epochs leave both models near chance; the point here is the plumbing.
cfg = FineTuneConfig(batch_size=8, max_epochs=3, image_size=(32, 32), weights=None)


def progress(model, fold, epoch, m):
    print(f"{model} fold {fold} epoch {epoch + 1}: test_acc {m['test_accuracy']:.3f}")


archive = run_experiment(["mobilenetv2", "efficientnetb0"], plan, index, cfg, work / "exp", progress=progress)
print(metrics_table([model_report(archive, m) for m in ("mobilenetv2", "efficientnetb0")]))
print("fused accuracy", evaluate_ensemble(["mobilenetv2", "efficientnetb0"], archive).report.accuracy)

# %% a second call finds every cell complete and returns at once
run_experiment(["mobilenetv2", "efficientnetb0"], plan, index, cfg, work / "exp")
print("archive at", archive.root)
