import json

import numpy as np
import pytest

from conftest import write_corpus

keras = pytest.importorskip("keras")

from poxscreen import training
from poxscreen.archive import ExperimentArchive, TrainingHistory
from poxscreen.backbones import HeadConfig, build_model
from poxscreen.dataset import AugmentationConfig, load_dataset, make_fold_plan
from poxscreen.errors import IntegrityError
from poxscreen.training import (
    FineTuneConfig,
    ModelArtifact,
    fit,
    predict_probs,
    run_experiment,
    train_fold,
)


def quick_cfg(**kw):
    base = dict(batch_size=8, max_epochs=1, image_size=(32, 32), weights=None, seed=0)
    base.update(kw)
    return FineTuneConfig(**base)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    index = load_dataset(write_corpus(tmp_path_factory.mktemp("corpus"), 6))
    return index, make_fold_plan(index, 2, 0.5, seed=0)


@pytest.fixture(scope="module")
def trained(setup, tmp_path_factory):
    index, plan = setup
    out = tmp_path_factory.mktemp("model") / "m"
    artifact, history = train_fold("mobilenetv2", 0, plan, index, quick_cfg(), out_dir=out)
    return index, plan, artifact, history


def test_lr_schedule_exact():
    cfg = FineTuneConfig()
    for e in range(100):
        assert abs(cfg.lr_at(e) - 1e-4 * 0.95 ** e) <= 1e-12
    assert all(FineTuneConfig(lr_decay=1.0).lr_at(e) == 1e-4 for e in range(10))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        FineTuneConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        FineTuneConfig(lr_decay=0)
    cfg = quick_cfg(augmentation=AugmentationConfig.identity())
    assert FineTuneConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_single_epoch(trained):
    _, _, artifact, history = trained
    assert len(history.train_loss) == len(history.test_loss) == 1
    assert history.lr_schedule == [1e-4] and history.stopped_epoch == 1
    assert (artifact.path / "model.keras").is_file()
    meta = json.loads((artifact.path / "meta.json").read_text())
    assert meta["backbone_id"] == "mobilenetv2" and meta["fold_id"] == 0
    artifact.verify()


def test_predict_probs(trained):
    index, plan, artifact, _ = trained
    _, test = plan.resolve(index, 0)
    a = predict_probs(artifact, test, 0, index.class_names)
    b = predict_probs(ModelArtifact(artifact.path), test, 0, index.class_names)
    assert a.probs.shape == (len(test), 4)
    assert a.sample_ids == tuple(r.record_id for r in test)
    np.testing.assert_allclose(a.probs.sum(axis=1), 1, atol=1e-5)
    assert np.array_equal(a.probs, b.probs)


def test_class_count_mismatch(trained):
    index, plan, artifact, _ = trained
    _, test = plan.resolve(index, 0)
    with pytest.raises(IntegrityError, match="4 classes"):
        predict_probs(artifact, test, 0, ["a", "b", "c"])


def test_tampered_sidecar(trained):
    index, plan, artifact, _ = trained
    meta = dict(artifact.meta)
    meta["train_config"] = dict(meta["train_config"], initial_lr=0.5)
    with pytest.raises(IntegrityError, match="digest"):
        ModelArtifact(artifact.path, meta).verify()
    meta = dict(artifact.meta, backbone_id="xception")
    with pytest.raises(IntegrityError):
        ModelArtifact(artifact.path, meta).verify()


def test_early_stopping_invariants(setup):
    index, plan = setup
    train, test = plan.resolve(index, 0)
    handle = build_model("mobilenetv2", HeadConfig(), weights=None, input_size=(32, 32))
    cfg = quick_cfg(max_epochs=6, early_stop_patience=2, initial_lr=1e-2)
    h = fit(handle, train, test, cfg)
    n = h.stopped_epoch
    assert len(h.test_loss) == n <= 6
    best = int(np.argmin(h.test_loss))
    assert h.best_epoch == best
    if n < 6:
        # stopped exactly `patience` epochs after the best one
        assert n - 1 - best == 2


def test_experiment_resume_and_failures(setup, tmp_path, monkeypatch):
    index, plan = setup
    out = tmp_path / "exp"
    archive = run_experiment(["mobilenetv2"], plan, index, quick_cfg(), out, folds=[0])
    assert archive.is_complete("mobilenetv2", 0) and not archive.is_complete("mobilenetv2", 1)
    pm = archive.probability_matrix("mobilenetv2", 0)
    assert not set(pm.sample_ids) & set(plan.train_ids(0))
    assert pm.sample_ids == plan.test_ids(0)
    assert isinstance(archive.history("mobilenetv2", 0), TrainingHistory)
    before = archive.read_manifest()

    calls = []
    real = training.train_fold

    def counting(*a, **kw):
        calls.append(a[:2])
        return real(*a, **kw)

    monkeypatch.setattr(training, "train_fold", counting)
    run_experiment(["mobilenetv2"], plan, index, quick_cfg(), out, folds=[0])
    assert calls == []
    assert archive.read_manifest() == before

    def broken(backbone, fold, *a, **kw):
        calls.append((backbone, fold))
        if fold == 0:
            raise RuntimeError("simulated crash")
        return real(backbone, fold, *a, **kw)

    monkeypatch.setattr(training, "train_fold", broken)
    # a new seed changes the cell digests, so both cells are retrained
    archive = run_experiment(["mobilenetv2"], plan, index, quick_cfg(seed=1), out)
    assert calls == [("mobilenetv2", 0), ("mobilenetv2", 1)]
    assert archive.cell_status("mobilenetv2", 0)["status"] == "failed"
    assert "simulated crash" in archive.cell_status("mobilenetv2", 0)["error"]
    assert archive.is_complete("mobilenetv2", 1)
    assert not ExperimentArchive(out).is_complete("mobilenetv2", 0)
