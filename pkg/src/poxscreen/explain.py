"""Grad-CAM heatmaps, LIME superpixel explanations and their overlays."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import tensorflow as tf
from matplotlib import colormaps
from PIL import Image
from skimage.segmentation import mark_boundaries, slic
from sklearn.linear_model import Ridge
from sklearn.metrics import pairwise_distances

from .backbones import ModelHandle, get_backbone, keras
from .errors import DataError, ExplanationError, LayerResolutionError
from .training import ModelArtifact

logger = logging.getLogger(__name__)


def _unwrap(model) -> tuple[keras.Model, str | None]:
    """Keras model plus the registry's default Grad-CAM layer, when known."""
    if isinstance(model, ModelArtifact):
        return model.model, get_backbone(model.backbone_id).feature_source
    if isinstance(model, ModelHandle):
        return model.model, model.backbone.feature_source
    return model, None


def conv_layer_names(model: keras.Model) -> list[str]:
    names = []
    for layer in model.layers:
        try:
            shape = layer.output.shape
        except (AttributeError, ValueError):
            continue
        if len(shape) == 4 and not isinstance(layer, keras.layers.InputLayer):
            names.append(layer.name)
    return names


def resolve_layer(model: keras.Model, layer_id: str | None, default: str | None = None) -> keras.layers.Layer:
    name = layer_id or default
    candidates = conv_layer_names(model)
    if name is None:
        if not candidates:
            raise LayerResolutionError("model has no 4-D feature map layers")
        name = candidates[-1]
    try:
        layer = model.get_layer(name)
    except ValueError:
        raise LayerResolutionError(
            f"no layer named {name!r}; spatial layers near the top: {', '.join(candidates[-8:])}"
        ) from None
    if name not in candidates:
        raise LayerResolutionError(f"layer {name!r} has no spatial feature map; try one of {', '.join(candidates[-8:])}")
    return layer


@dataclass(eq=False)
class HeatMap:
    grid: np.ndarray
    target_class: int
    source_layer: str
    channel_weights: np.ndarray
    probabilities: np.ndarray
    is_zero: bool = False

    def sidecar(self) -> dict:
        return {"method": "gradcam", "target_class": self.target_class, "layer_id": self.source_layer}


def feature_gradients(model: keras.Model, image: np.ndarray, layer: keras.layers.Layer, target_class: int | None):
    """Feature map of ``layer``, gradient of the target-class probability w.r.t. it, and the output."""
    grad_model = keras.Model(model.inputs, [layer.output, model.output])
    x = tf.convert_to_tensor(np.asarray(image)[None], dtype=model.inputs[0].dtype)
    with tf.GradientTape() as tape:
        fmap, preds = grad_model(x, training=False)
        if target_class is None:
            target_class = int(tf.argmax(preds[0]))
        score = preds[:, target_class]
    grads = tape.gradient(score, fmap)
    if grads is None:
        grads = tf.zeros_like(fmap)
    return fmap.numpy()[0], grads.numpy()[0], preds.numpy()[0], target_class


def grad_cam(model, image: np.ndarray, layer_id: str | None = None, target_class: int | None = None) -> HeatMap:
    """Gradient-weighted class activation map for one preprocessed ``(H, W, 3)`` image.

    Channel weights are the spatially averaged gradients of the target-class
    probability (default: the predicted class); the map is the ReLU of the
    weighted channel sum, bilinearly upsampled to the image size and scaled
    so its maximum is 1. An all-zero map is returned with ``is_zero=True``.
    """
    keras_model, default = _unwrap(model)
    image = np.asarray(image)
    if image.ndim != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {image.shape}")
    layer = resolve_layer(keras_model, layer_id, default)
    fmap, grads, probs, target = feature_gradients(keras_model, image, layer, target_class)
    weights = grads.mean(axis=(0, 1))
    cam = np.maximum((fmap * weights).sum(axis=-1), 0.0)
    grid = tf.image.resize(cam[..., None].astype(np.float32), image.shape[:2], method="bilinear").numpy()[..., 0]
    grid = np.maximum(grid, 0.0)
    peak = float(grid.max())
    is_zero = not peak > 0
    grid = np.zeros_like(grid) if is_zero else grid / peak
    return HeatMap(grid, int(target), layer.name, weights, probs, is_zero)


@dataclass(eq=False)
class SuperpixelExplanation:
    segments: np.ndarray
    local_exp: dict[int, list[tuple[int, float]]]
    target_labels: list[int]
    seed: int
    n_samples: int
    n_features: int
    intercept: dict[int, float] = field(default_factory=dict)
    score: dict[int, float] = field(default_factory=dict)

    @property
    def selected_features(self) -> list[tuple[int, float]]:
        """Features for the top label."""
        return self.local_exp[self.target_labels[0]]

    def to_dict(self) -> dict:
        return {
            "method": "lime",
            "seed": self.seed,
            "n_samples": self.n_samples,
            "n_features": self.n_features,
            "top_labels": len(self.target_labels),
            "target_labels": self.target_labels,
            "features": {str(k): [[s, w] for s, w in v] for k, v in self.local_exp.items()},
            "intercept": {str(k): v for k, v in self.intercept.items()},
            "score": {str(k): v for k, v in self.score.items()},
            "n_segments": int(self.segments.max()) + 1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def as_predict_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if callable(model) and not isinstance(model, (keras.Model, ModelArtifact, ModelHandle)):
        return model
    keras_model, _ = _unwrap(model)
    dtype = keras_model.inputs[0].dtype

    def predict(batch):
        return np.asarray(keras_model(tf.convert_to_tensor(batch, dtype=dtype), training=False))

    return predict


def segment_image(image: np.ndarray, n_segments: int = 50, compactness: float = 10.0) -> np.ndarray:
    return slic(image, n_segments=n_segments, compactness=compactness, start_label=0, channel_axis=-1)


def lime_explain(
    model,
    image: np.ndarray,
    n_features: int = 5,
    n_samples: int = 1000,
    top_labels: int = 4,
    seed: int = 0,
    *,
    n_segments: int = 50,
    segments: np.ndarray | None = None,
    hide_color: float | None = 0.0,
    kernel_width: float = 0.25,
    ridge_alpha: float = 1.0,
    batch_size: int = 50,
) -> SuperpixelExplanation:
    """Local linear surrogate over random superpixel on/off masks.

    Hidden superpixels are filled with ``hide_color`` (``None``: the
    segment's mean colour). The first sample is the unmasked image. Samples
    are weighted by ``sqrt(exp(-d**2 / kernel_width**2))`` with ``d`` the
    cosine distance of the mask to the all-on mask; a weighted ridge fit on
    every superpixel picks the ``n_features`` largest ``|coef|`` per label,
    which are then refitted alone for the reported weights.
    """
    if min(n_features, n_samples, top_labels) < 1:
        raise ValueError("n_features, n_samples and top_labels must be positive")
    predict = as_predict_fn(model)
    image = np.asarray(image, dtype=np.float64)
    if segments is None:
        segments = segment_image(image, n_segments)
    n_seg = int(segments.max()) + 1
    fudged = image.copy()
    if hide_color is None:
        for s in range(n_seg):
            fudged[segments == s] = image[segments == s].mean(axis=0)
    else:
        fudged[:] = hide_color

    rng = np.random.default_rng(seed)
    data = rng.integers(0, 2, size=(n_samples, n_seg))
    data[0] = 1
    preds = []
    for start in range(0, n_samples, batch_size):
        masks = data[start:start + batch_size].astype(bool)[:, segments]  # (b, H, W)
        batch = np.where(masks[..., None], image[None], fudged[None])
        try:
            preds.append(np.asarray(predict(batch), dtype=np.float64))
        except Exception as exc:
            raise ExplanationError(f"model inference failed after {start} of {n_samples} samples: {exc}") from exc
    preds = np.concatenate(preds)

    distances = pairwise_distances(data, data[:1], metric="cosine").ravel()
    weights = np.sqrt(np.exp(-(distances ** 2) / kernel_width ** 2))
    labels = [int(c) for c in np.argsort(-preds[0], kind="stable")[:top_labels]]
    local_exp, intercept, score = {}, {}, {}
    for label in labels:
        y = preds[:, label]
        full = Ridge(alpha=ridge_alpha).fit(data, y, sample_weight=weights)
        used = np.argsort(-np.abs(full.coef_), kind="stable")[:n_features]
        sub = Ridge(alpha=ridge_alpha).fit(data[:, used], y, sample_weight=weights)
        order = np.argsort(-np.abs(sub.coef_), kind="stable")
        local_exp[label] = [(int(used[i]), float(sub.coef_[i])) for i in order]
        intercept[label] = float(sub.intercept_)
        score[label] = float(sub.score(data[:, used], y, sample_weight=weights)) if n_samples > 1 else 0.0
    return SuperpixelExplanation(segments, local_exp, labels, seed, n_samples, n_features, intercept, score)


@dataclass(frozen=True)
class OverlayStyle:
    colormap: str = "jet"
    alpha: float = 0.5
    boundary_color: tuple[float, float, float] = (1.0, 1.0, 0.0)
    positive_only: bool = False


def _as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    image = image.astype(np.float64)
    return image / 255.0 if image.max() > 1.0 else image


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def render_overlay(image: np.ndarray, explanation, style: OverlayStyle | None = None,
                   path: str | Path | None = None, label: int | None = None) -> np.ndarray:
    """Heatmaps become a colour-mapped overlay whose opacity follows the heat;
    superpixel explanations become outlines around the selected segments."""
    style = style or OverlayStyle()
    img = _as_float_image(image)
    if isinstance(explanation, HeatMap):
        grid = explanation.grid
        if grid.shape != img.shape[:2]:
            raise DataError(f"heatmap {grid.shape} does not match image {img.shape[:2]}")
        colour = colormaps[style.colormap](grid)[..., :3]
        a = style.alpha * grid[..., None]
        out = (1 - a) * img + a * colour
    elif isinstance(explanation, SuperpixelExplanation):
        if explanation.segments.shape != img.shape[:2]:
            raise DataError(f"segments {explanation.segments.shape} do not match image {img.shape[:2]}")
        feats = explanation.local_exp[label if label is not None else explanation.target_labels[0]]
        chosen = [s for s, w in feats if w > 0 or not style.positive_only]
        mask = np.isin(explanation.segments, chosen)
        out = mark_boundaries(img, np.where(mask, explanation.segments + 1, 0), color=style.boundary_color)
    else:
        raise TypeError(f"cannot render {type(explanation).__name__}")
    rendered = _to_uint8(out)
    if path is not None:
        Image.fromarray(rendered).save(path)
    return rendered


def composite_panel(image: np.ndarray, heatmap: HeatMap, lime: SuperpixelExplanation,
                    path: str | Path | None = None, style: OverlayStyle | None = None, gap: int = 4) -> np.ndarray:
    """Original, Grad-CAM and LIME views side by side."""
    panels = [_to_uint8(_as_float_image(image)), render_overlay(image, heatmap, style), render_overlay(image, lime, style)]
    h = panels[0].shape[0]
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    out = np.concatenate([panels[0], spacer, panels[1], spacer, panels[2]], axis=1)
    if path is not None:
        Image.fromarray(out).save(path)
    return out
