import json

import numpy as np
import pytest

from conftest import one_hot_rows, synthetic_archive
from poxscreen.archive import TrainingHistory
from poxscreen.metrics import ConfusionMatrix, macro_report
from poxscreen.report import build_report, display_name, metrics_table, pct, plot_history, registry_order


@pytest.mark.parametrize("x, s", [
    (0.85125, "85.13"), (0.851249, "85.12"), (1.0, "100.00"), (0.0, "0.00"), (0.00005, "0.01"), (0.8651, "86.51"),
])
def test_pct_rounds_half_up(x, s):
    assert pct(x) == s


def test_registry_order_is_kept():
    assert registry_order(["densenet169", "xception+densenet169", "vgg16", "xception"]) == [
        "vgg16", "xception", "densenet169", "xception+densenet169"]
    assert display_name("xception+densenet169") == "Xception + DenseNet-169"


def test_perfect_model_table():
    labels = np.arange(8) % 4
    cm = ConfusionMatrix.from_labels(labels, labels, ["a", "b", "c", "d"])
    table = metrics_table([macro_report(cm, 0, "xception")])
    assert "| Xception | 100.00 | 100.00 | 100.00 | 100.00 | 1 |" in table


def test_single_epoch_curve(tmp_path):
    h = TrainingHistory([0.5], [0.7], [0.6], [0.65], [1e-4], 1, 0)
    assert plot_history(h, tmp_path / "c.png").stat().st_size > 0


def test_bundle_is_byte_stable(tmp_path):
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    wrong = labels.copy()
    wrong[[1, 3]] = [2, 0]
    archive = synthetic_archive(tmp_path / "a", {
        "xception": lambda k: (one_hot_rows(labels), labels),
        "densenet169": lambda k: (one_hot_rows(wrong, conf=0.95), labels),
    }, n_folds=2)
    archive.write_history("xception", 0, TrainingHistory([1.0], [0.5], [1.1], [0.4], [1e-4], 1, 0))
    fusion = {"members": ["xception", "densenet169"], "mode": "argmax_concat"}
    a = build_report(archive, tmp_path / "r1", ensembles=[fusion])
    first = (tmp_path / "r1" / "report.json").read_bytes()
    build_report(archive, tmp_path / "r1", ensembles=[fusion])
    assert (tmp_path / "r1" / "report.json").read_bytes() == first
    assert list(a["models"]) == ["xception", "densenet169"]
    assert a["models"]["xception"]["folds"][0]["confusion"] == np.diag([2, 2, 2, 2]).tolist()
    figs = sorted(p.name for p in (tmp_path / "r1" / "figures").iterdir())
    assert "curves_xception_fold0.png" in figs
    assert "confusion_xception_plus_densenet169_fold1.png" in figs
    # densenet169 is more confident, so its mistakes win the fusion
    ens = a["ensembles"]["xception+densenet169"]["folds"][0]["confusion"]
    assert np.trace(ens) == 6
    md = (tmp_path / "r1" / "report.md").read_text()
    assert md.index("| Xception |") < md.index("| DenseNet-169 |") < md.index("| Xception + DenseNet-169 |")
    json.loads(first)
