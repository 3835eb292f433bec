import numpy as np
import pytest

keras = pytest.importorskip("keras")

from poxscreen.backbones import (
    HeadConfig,
    build_model,
    get_backbone,
    head_signature,
    list_backbones,
    parse_backbones,
)
from poxscreen.errors import RegistryError, WeightsUnavailableError


def test_registry_order_and_inputs():
    specs = list_backbones()
    assert len(specs) == 13
    assert specs[0].id == "vgg16" and specs[7].id == "xception"
    assert specs[-1].id == "densenet169"
    assert all(s.input_size == (150, 150) for s in specs)
    assert all(s.pretrained_weights == "imagenet" for s in specs)


def test_unknown_backbone():
    with pytest.raises(RegistryError, match="resnet152"):
        get_backbone("resnet152")
    with pytest.raises(RegistryError):
        parse_backbones("vgg16,resnet152")
    assert parse_backbones("all")[7] == "xception"
    assert parse_backbones(" vgg16 , xception ") == ["vgg16", "xception"]


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(n_classes=1)
    with pytest.raises(ValueError):
        HeadConfig(dropout_rate=1.0)


def test_xception_forward_is_distribution():
    handle = build_model("xception", HeadConfig(n_classes=4), weights=None)
    assert handle.model.get_layer("block14_sepconv2_act") is not None
    x = np.random.default_rng(0).uniform(0, 1, (2, 150, 150, 3)).astype("float32")
    p = np.asarray(handle.model(x, training=False))
    assert p.shape == (2, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_frozen_vgg16_trains_only_head():
    handle = build_model("vgg16", HeadConfig(n_classes=2), freeze_backbone=True, weights=None)
    # 512*128 + 128 (dense) + 128*2 + 2 (output)
    assert handle.trainable_parameter_count == 65922
    assert handle.model.output_shape == (None, 2)
    assert [type(layer).__name__ for layer in handle.head_layers()] == [
        "GlobalAveragePooling2D", "Dense", "Dropout", "Dense"]


def test_seeded_head_is_deterministic():
    a = build_model("mobilenetv2", HeadConfig(), weights=None, input_size=(32, 32), seed=5)
    b = build_model("mobilenetv2", HeadConfig(), weights=None, input_size=(32, 32), seed=5)
    for la, lb in zip(a.head_layers(), b.head_layers()):
        for wa, wb in zip(la.get_weights(), lb.get_weights()):
            assert np.array_equal(wa, wb)


def test_missing_weights_offline(tmp_path, monkeypatch):
    monkeypatch.setenv("POXSCREEN_WEIGHTS_DIR", str(tmp_path))
    monkeypatch.setenv("HOME", str(tmp_path))
    with pytest.raises(WeightsUnavailableError, match="mobilenet_v2"):
        build_model("mobilenetv2", allow_download=False)


@pytest.mark.slow
def test_same_head_on_every_backbone():
    signatures = set()
    for spec in list_backbones():
        handle = build_model(spec.id, HeadConfig(), weights=None)
        signatures.add(tuple(head_signature(handle.model)))
        assert handle.model.output_shape == (None, 4)
        assert handle.model.get_layer(spec.feature_source) is not None
        keras.backend.clear_session()
    assert signatures == {(
        ("GlobalAveragePooling2D", None, None, None),
        ("Dense", 128, "relu", None),
        ("Dropout", None, None, 0.0),
        ("Dense", 4, "softmax", None),
    )}
