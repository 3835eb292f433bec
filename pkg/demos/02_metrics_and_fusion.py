# Macro metrics and fusing two models' probabilities, on made-up outputs.
import numpy as np

from poxscreen.fusion import FusionInput, fuse_argmax, fuse_matrix
from poxscreen.metrics import ConfusionMatrix, confusion_from_probs, macro_report
from poxscreen.probs import ProbabilityMatrix, dumps_probs
from poxscreen.report import metrics_table

names = ["Chickenpox", "Measles", "Monkeypox", "Normal"]

# %% a confusion matrix: rows are the true class, columns the prediction
cm = ConfusionMatrix(np.array([[66, 0, 0, 0], [3, 50, 4, 1], [2, 5, 110, 3], [0, 0, 0, 111]]), tuple(names))
rep = macro_report(cm, model="xception")
print(metrics_table([rep]))
for name, prf in rep.per_class.items():
    print(f"{name:11s} P={prf.precision:.4f} R={prf.recall:.4f} F={prf.f1:.4f}")

# %% the fused class is the class of the single largest probability across members
X = [0.1, 0.2, 0.6, 0.1]
D = [0.4, 0.3, 0.2, 0.1]
print("fuse([X, D]) ->", fuse_argmax([X, D], 4))

# %% whole matrices: two models that are each wrong where the other is sure
rng = np.random.default_rng(1)
labels = rng.integers(0, 4, 40)


def model_rows(wrong):
    rows = np.full((40, 4), 0.1 / 3)
    rows[np.arange(40), labels] = 0.9
    rows[wrong] = 0.4 / 3
    rows[wrong, (labels[wrong] + 1) % 4] = 0.6
    return rows


ids = tuple(f"img{i:02d}" for i in range(40))
a = ProbabilityMatrix("xception", 0, ids, model_rows(np.arange(0, 8)), labels)
b = ProbabilityMatrix("densenet169", 0, ids, model_rows(np.arange(8, 16)), labels)
for pm in (a, b):
    print(pm.model_id, "accuracy", macro_report(confusion_from_probs(pm, names)).accuracy)
fused = fuse_matrix(FusionInput((("xception", a), ("densenet169", b))))
print("fused accuracy", (fused.predicted == labels).mean())
print("decided by", dict(zip(*np.unique(fused.provenance, return_counts=True))))

# %% what lands on disk between training and evaluation
print(dumps_probs(a).splitlines()[:3])
