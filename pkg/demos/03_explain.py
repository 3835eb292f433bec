# Grad-CAM and LIME on a small untrained network and on a toy scorer.
from pathlib import Path

import keras
import numpy as np
from scipy import ndimage

from poxscreen.explain import composite_panel, grad_cam, lime_explain, render_overlay

out = Path("demo_output")
out.mkdir(exist_ok=True)

# %% image: smooth background with one bright square
rng = np.random.default_rng(0)
bg = ndimage.gaussian_filter(rng.normal(0, 1, (64, 64, 3)), (3, 3, 0))
img = np.clip(0.45 + 0.08 * bg / bg.std(), 0, 1)
img[16:40, 16:40] = 0.9

# %% Grad-CAM needs a conv layer; any keras model with a 4-D feature map will do
inp = keras.Input((64, 64, 3))
x = keras.layers.Conv2D(8, 3, activation="relu")(inp)
x = keras.layers.Conv2D(8, 3, activation="relu", name="last_conv")(x)
x = keras.layers.GlobalAveragePooling2D()(x)
model = keras.Model(inp, keras.layers.Dense(4, activation="softmax")(x))
heat = grad_cam(model, img.astype("float32"), "last_conv")
print("target class", heat.target_class, "map", heat.grid.shape, "all zero:", heat.is_zero)

# %% LIME with a scorer that only looks at the square
region = np.zeros((64, 64), bool)
region[16:40, 16:40] = True


def scorer(batch):
    s = batch[:, region].mean(axis=(1, 2))
    return np.stack([s] + [(1 - s) / 3] * 3, axis=1)


lime = lime_explain(scorer, img, seed=7)
print("top superpixels for class 0:", lime.local_exp[0])
top = lime.local_exp[0][0][0]
print("share of the top superpixel inside the square:", region[lime.segments == top].mean())

render_overlay(img, heat, path=out / "gradcam.png")
render_overlay(img, lime, path=out / "lime.png")
composite_panel(img, heat, lime, path=out / "panel.png")
print("wrote", sorted(p.name for p in out.iterdir()))
