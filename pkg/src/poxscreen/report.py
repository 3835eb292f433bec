"""Tables, confusion-matrix figures, training curves and the consolidated report bundle."""

from __future__ import annotations

import json
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .archive import ExperimentArchive, TrainingHistory  # noqa: E402
from .backbones import REGISTRY  # noqa: E402
from .dataset import DatasetIndex  # noqa: E402
from .errors import CompletenessError  # noqa: E402
from .fusion import ComboResult, ensemble_name, evaluate_ensemble  # noqa: E402
from .metrics import ConfusionMatrix, MetricsReport, average_over_folds, confusion_from_probs, macro_report  # noqa: E402

COLUMNS = ("Precision", "Recall", "F1-score", "Accuracy")
# no creation timestamp or software tag, so re-rendered figures stay byte-stable
PNG_METADATA = {"Software": None}


def pct(x: float) -> str:
    """``0.85125 -> "85.13"``: a fraction as a percentage, rounded half up to two decimals."""
    return str((Decimal(repr(float(x))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def display_name(model_id: str) -> str:
    parts = model_id.split("+")
    names = [REGISTRY[p].display_name if p in REGISTRY else p for p in parts]
    return " + ".join(names)


def registry_order(model_ids: Sequence[str]) -> list[str]:
    """Registry backbones first in table order, then anything else (ensembles) as given."""
    rank = {m: i for i, m in enumerate(REGISTRY)}
    known = sorted((m for m in model_ids if m in rank), key=rank.__getitem__)
    return known + [m for m in model_ids if m not in rank]


def _markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def metric_cells(report: MetricsReport) -> list[str]:
    m = report.macro
    return [pct(m.precision), pct(m.recall), pct(m.f1), pct(report.accuracy)]


def counts_table(index: DatasetIndex) -> str:
    names = index.class_names
    counts = index.counts
    return _markdown(["Category"] + names + ["Total"], [["#Images"] + [f"{c:,}" for c in counts] + [f"{sum(counts):,}"]])


def metrics_table(reports: Sequence[MetricsReport]) -> str:
    by_model = {r.model: r for r in reports}
    rows = [[display_name(m), *metric_cells(by_model[m]), str(by_model[m].n_folds)]
            for m in registry_order(list(by_model))]
    return _markdown(["Model", *COLUMNS, "Folds"], rows)


def combo_table(results: Sequence[ComboResult]) -> str:
    rows = [[" + ".join(r.member_ids), *metric_cells(r.report)] for r in results]
    return _markdown(["Models", *COLUMNS], rows)


def model_report(archive: ExperimentArchive, model_id: str, folds: Sequence[int] | None = None) -> MetricsReport:
    folds = list(archive.folds(model_id) if folds is None else folds)
    archive.require([model_id], folds)
    names = archive.class_names
    per_fold = [macro_report(confusion_from_probs(archive.probability_matrix(model_id, k), names), k, model_id)
                for k in folds]
    return average_over_folds(per_fold)


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    counts = np.asarray(cm.counts)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(counts, cmap="Blues")
    ticks = range(cm.n_classes)
    ax.set_xticks(ticks, cm.class_names, rotation=30, ha="right")
    ax.set_yticks(ticks, cm.class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    peak = counts.max() if counts.size else 0
    for i in ticks:
        for j in ticks:
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > peak / 2 else "black")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return Path(path)


def plot_history(history: TrainingHistory, path: str | Path, title: str = "") -> Path:
    """Train/test accuracy and loss per epoch, side by side."""
    epochs = np.arange(1, len(history.train_loss) + 1)
    fig, (acc, loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, label in ((acc, "accuracy", "Accuracy"), (loss, "loss", "Loss")):
        ax.plot(epochs, getattr(history, "train_" + key), "o-", label="train", markersize=3)
        ax.plot(epochs, getattr(history, "test_" + key), "o-", label="test", markersize=3)
        ax.set_xlabel("Epoch")
        ax.set_ylabel(label)
        ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return Path(path)


def _slug(name: str) -> str:
    return name.replace("+", "_plus_")


def build_report(
    archive: ExperimentArchive,
    out_dir: str | Path,
    models: Sequence[str] | None = None,
    ensembles: Sequence[dict] = (),
    figures: bool = True,
) -> dict:
    """Write ``report.json``, ``report.md`` and the figures; return the JSON payload.

    ``ensembles`` are fusion reports (as written by ``poxscreen fuse``); their
    members are re-fused from the archive to draw per-fold confusion matrices.
    The JSON holds no timestamps, so re-running on the same archive gives the
    same bytes.
    """
    out = Path(out_dir)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    names = archive.class_names
    models = registry_order(list(models) if models is not None else archive.models())
    payload = {"class_names": names, "models": {}, "ensembles": {}}
    reports = []

    for m in models:
        folds = archive.folds(m)
        archive.require([m], folds)
        per_fold, folds_out = [], []
        for k in folds:
            cm = confusion_from_probs(archive.probability_matrix(m, k), names)
            per_fold.append(macro_report(cm, k, m))
            folds_out.append(dict(per_fold[-1].to_dict(), confusion=np.asarray(cm.counts).tolist()))
            if not figures:
                continue
            title = f"{display_name(m)}, fold {k}"
            plot_confusion(cm, fig_dir / f"confusion_{_slug(m)}_fold{k}.png", title)
            try:
                hist = archive.history(m, k)
            except CompletenessError:  # archives assembled from probability files alone
                continue
            if hist.train_loss:
                plot_history(hist, fig_dir / f"curves_{_slug(m)}_fold{k}.png", title)
        averaged = average_over_folds(per_fold)
        reports.append(averaged)
        payload["models"][m] = {"averaged": averaged.to_dict(), "folds": folds_out}

    for fr in ensembles:
        members, mode = fr["members"], fr.get("mode", "argmax_concat")
        name = ensemble_name(members)
        result, predictions = evaluate_ensemble(members, archive, mode=mode, class_names=names, return_predictions=True)
        folds_out = []
        for rep, pv in zip(result.per_fold, predictions):
            cm = ConfusionMatrix.from_labels(pv.true_labels, pv.predicted, names)
            folds_out.append(dict(rep.to_dict(), confusion=np.asarray(cm.counts).tolist()))
            if figures:
                plot_confusion(cm, fig_dir / f"confusion_{_slug(name)}_fold{rep.fold_id}.png",
                               f"{display_name(name)}, fold {rep.fold_id}")
        reports.append(result.report)
        payload["ensembles"][name] = {"members": list(members), "mode": mode,
                                      "averaged": result.report.to_dict(), "folds": folds_out}

    (out / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    md = ["# Results", "", "Fold-averaged macro metrics (%).", "", metrics_table(reports)]
    for name, entry in {**payload["models"], **payload["ensembles"]}.items():
        md += [f"## {display_name(name)}", ""]
        for f in entry["folds"]:
            md.append(f"Fold {f['fold']}: accuracy {pct(f['accuracy'])}%, confusion {f['confusion']}")
        md.append("")
    (out / "report.md").write_text("\n".join(md), encoding="utf-8")
    return payload
