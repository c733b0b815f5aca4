"""
Attribution heatmaps on the shapes dataset
==========================================

Trains a small CNN, fits a per-sample bottleneck on a few validation images
and draws its heatmap next to gradient, Grad-CAM and occlusion maps.
Run from anywhere; figures land in ``demo_output/``.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from iba import baselines as BL
from iba.bottleneck import estimate_stats, per_sample_attribution
from iba.data import ShapesDataset
from iba.network import accuracy, build_default_model, train

out = Path("demo_output")
out.mkdir(exist_ok=True)

# %%
# Three epochs on the full training set are enough for about 94% validation accuracy.
data = ShapesDataset.generate(n_val=50, seed=0)
model, _ = train(build_default_model(data.config.classes, seed=0), data, epochs=3, seed=0)
print("validation accuracy", accuracy(model, data.x_val, data.y_val))

# %%
# Feature statistics at the tap come from training images only.
stats = estimate_stats(model, "conv3", data.x_train[:500])

# %%
# One row per image: input, per-sample bits, gradient, Grad-CAM, occlusion.
rows = 4
fig, axes = plt.subplots(rows, 5, figsize=(10, 2.2 * rows))
for r in range(rows):
    img, label = data.x_val[r], int(data.y_val[r])
    heat, fit = per_sample_attribution(model, "conv3", stats, img, label=label)
    maps = [
        img.mean(axis=0),
        heat.values,
        np.abs(BL.gradient_map(model, img, label).values),
        BL.grad_cam(model, img, label).values,
        BL.occlusion(model, img, label, patch=8).values,
    ]
    titles = ["input", f"bits (p={fit.class_prob:.2f})", "|gradient|", "Grad-CAM", "occlusion 8"]
    for ax, m, t in zip(axes[r], maps, titles):
        ax.imshow(m, cmap="gray" if t == "input" else "viridis")
        x, y, w, h = data.box_val[r]
        ax.add_patch(plt.Rectangle((x - 0.5, y - 0.5), w, h, fill=False, color="red", lw=0.8))
        ax.set_xticks([])
        ax.set_yticks([])
        if r == 0:
            ax.set_title(t, fontsize=9)
fig.tight_layout()
fig.savefig(out / "heatmaps.png", dpi=100)
print("wrote", out / "heatmaps.png")
