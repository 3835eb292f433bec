"""Registry of ImageNet backbones and the shared classification head.

Every backbone loses its original classifier and gets the same head:
global average pooling, one ReLU dense layer, optional dropout and a
softmax output layer.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import keras  # noqa: E402

from .errors import RegistryError, WeightsUnavailableError  # noqa: E402

WEIGHTS_ENV = "POXSCREEN_WEIGHTS_DIR"
HEAD_PREFIX = "head_"


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    display_name: str
    factory: str
    feature_source: str
    weights_file: str
    input_size: tuple[int, int] = (150, 150)
    pretrained_weights: str = "imagenet"

    def constructor(self):
        return getattr(keras.applications, self.factory)


_SPECS = [
    ("vgg16", "VGG-16", "VGG16", "block5_conv3", "vgg16_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("vgg19", "VGG-19", "VGG19", "block5_conv4", "vgg19_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("resnet50", "ResNet-50", "ResNet50", "conv5_block3_out", "resnet50_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("resnet101", "ResNet-101", "ResNet101", "conv5_block3_out", "resnet101_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("inceptionresnetv2", "IncepResNetv2", "InceptionResNetV2", "conv_7b_ac",
     "inception_resnet_v2_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("mobilenetv2", "MobileNetV2", "MobileNetV2", "out_relu",
     "mobilenet_v2_weights_tf_dim_ordering_tf_kernels_1.0_224_no_top.h5"),
    ("inceptionv3", "InceptionV3", "InceptionV3", "mixed10", "inception_v3_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("xception", "Xception", "Xception", "block14_sepconv2_act", "xception_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("efficientnetb0", "EfficientNet-B0", "EfficientNetB0", "top_activation", "efficientnetb0_notop.h5"),
    ("efficientnetb1", "EfficientNet-B1", "EfficientNetB1", "top_activation", "efficientnetb1_notop.h5"),
    ("efficientnetb2", "EfficientNet-B2", "EfficientNetB2", "top_activation", "efficientnetb2_notop.h5"),
    ("densenet121", "DenseNet-121", "DenseNet121", "relu", "densenet121_weights_tf_dim_ordering_tf_kernels_notop.h5"),
    ("densenet169", "DenseNet-169", "DenseNet169", "relu", "densenet169_weights_tf_dim_ordering_tf_kernels_notop.h5"),
]

REGISTRY: dict[str, BackboneSpec] = {s[0]: BackboneSpec(*s) for s in _SPECS}


def list_backbones() -> list[BackboneSpec]:
    """All registered backbones, in the order of the comparison table."""
    return list(REGISTRY.values())


def get_backbone(backbone_id: str) -> BackboneSpec:
    try:
        return REGISTRY[backbone_id]
    except KeyError:
        raise RegistryError(
            f"unknown backbone {backbone_id!r}; choose from {', '.join(REGISTRY)}"
        ) from None


def parse_backbones(text: str) -> list[str]:
    """``"all"`` or a comma-separated id list, validated against the registry."""
    if text.strip() == "all":
        return list(REGISTRY)
    ids = [t.strip() for t in text.split(",") if t.strip()]
    for i in ids:
        get_backbone(i)
    return ids


@dataclass(frozen=True)
class HeadConfig:
    pooling: str = "global_average"
    hidden_units: int = 128
    hidden_activation: str = "relu"
    dropout_rate: float = 0.0
    n_classes: int = 4
    output_activation: str = "softmax"

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.pooling != "global_average":
            raise ValueError("only global_average pooling is supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelHandle:
    backbone: BackboneSpec
    head: HeadConfig
    model: keras.Model
    trainable_mask: dict[str, bool] = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return self.model.count_params()

    @property
    def trainable_parameter_count(self) -> int:
        return sum(int(w.numpy().size) for w in self.model.trainable_weights)

    def head_layers(self) -> list[keras.layers.Layer]:
        return head_layers(self.model)


def weights_search_path() -> list[Path]:
    dirs = []
    if os.environ.get(WEIGHTS_ENV):
        dirs.append(Path(os.environ[WEIGHTS_ENV]))
    dirs.append(Path(os.path.expanduser("~")) / ".keras" / "models")
    return dirs


def resolve_weights(spec: BackboneSpec, weights: str | None, allow_download: bool = True) -> str | None:
    """Turn ``"imagenet"`` into a local weights file, or ``"imagenet"`` to let Keras download it.

    Local copies are looked up in ``$POXSCREEN_WEIGHTS_DIR`` then the Keras cache.
    """
    if weights != "imagenet":
        return weights
    for d in weights_search_path():
        candidate = d / spec.weights_file
        if candidate.is_file():
            return str(candidate)
    if not allow_download:
        raise WeightsUnavailableError(
            f"no local ImageNet weights for {spec.id}: put {spec.weights_file} in ${WEIGHTS_ENV}"
        )
    return "imagenet"


def head_layers(model: keras.Model) -> list[keras.layers.Layer]:
    return [layer for layer in model.layers if layer.name.startswith(HEAD_PREFIX)]


def head_signature(model: keras.Model) -> list[tuple]:
    """Structural description of the head: (layer type, units, activation, rate)."""
    sig = []
    for layer in head_layers(model):
        act = getattr(layer, "activation", None)
        sig.append((
            type(layer).__name__,
            getattr(layer, "units", None),
            getattr(act, "__name__", None),
            getattr(layer, "rate", None),
        ))
    return sig


def attach_head(features, head: HeadConfig, seed: int = 0):
    init = keras.initializers.GlorotUniform
    x = keras.layers.GlobalAveragePooling2D(name=HEAD_PREFIX + "gap")(features)
    x = keras.layers.Dense(
        head.hidden_units, activation=head.hidden_activation,
        kernel_initializer=init(seed=seed), name=HEAD_PREFIX + "dense",
    )(x)
    x = keras.layers.Dropout(head.dropout_rate, seed=seed, name=HEAD_PREFIX + "dropout")(x)
    return keras.layers.Dense(
        head.n_classes, activation=head.output_activation,
        kernel_initializer=init(seed=seed + 1), name=HEAD_PREFIX + "output",
    )(x)


def build_model(
    backbone_id: str,
    head: HeadConfig | None = None,
    freeze_backbone: bool = False,
    *,
    weights: str | None = "imagenet",
    input_size: tuple[int, int] | None = None,
    seed: int = 0,
    allow_download: bool = True,
) -> ModelHandle:
    """Backbone without its classifier, followed by the shared head.

    The backbone layers are flattened into the returned functional model so
    intermediate layers (e.g. ``block14_sepconv2_act``) can be addressed by
    name. ``weights=None`` gives a randomly initialised backbone.
    """
    spec = get_backbone(backbone_id)
    head = head or HeadConfig()
    size = tuple(input_size or spec.input_size)
    resolved = resolve_weights(spec, weights, allow_download)
    inputs = keras.Input(shape=size + (3,), name="image")
    try:
        base = spec.constructor()(include_top=False, weights=resolved, input_tensor=inputs)
    except Exception as exc:  # download or file errors surface from deep inside keras
        if weights == "imagenet":
            raise WeightsUnavailableError(
                f"could not load ImageNet weights for {spec.id} ({type(exc).__name__}: {exc}); "
                f"place {spec.weights_file} in ${WEIGHTS_ENV}"
            ) from exc
        raise
    if freeze_backbone:
        for layer in base.layers:
            layer.trainable = False
    outputs = attach_head(base.output, head, seed)
    model = keras.Model(inputs, outputs, name=f"{spec.id}_poxscreen")
    return ModelHandle(spec, head, model, {"backbone": not freeze_backbone, "head": True})
