"""
Degradation curves
==================

Removes 8x8 tiles in most-relevant-first and least-relevant-first order and
compares the area between the two curves for several methods.
"""

from pathlib import Path

from iba import baselines as BL
from iba import evaluation as E
from iba.data import ShapesDataset
from iba.export import plot_degradation
from iba.network import build_default_model, train

out = Path("demo_output")
out.mkdir(exist_ok=True)

data = ShapesDataset.generate(n_val=40, seed=0)
model, _ = train(build_default_model(data.config.classes, seed=0), data, epochs=3, seed=0)

x = data.x_val
targets = model.logits(x).argmax(axis=1)
methods = {
    "random": BL.make_method("random"),
    "gradient": BL.make_method("gradient"),
    "occlusion8": BL.make_method("occlusion8"),
    "per-sample": BL.make_method("per-sample", tap="conv3", stats_images=data.x_train[:500]),
}

# %%
curves = {}
for name, method in methods.items():
    heat = [method(model, img, int(t), seed=i).values for i, (img, t) in enumerate(zip(x, targets))]
    morf = E.degradation_curve(model, x, heat, 8, "morf", fill=data.channel_mean, targets=targets)
    lerf = E.degradation_curve(model, x, heat, 8, "lerf", fill=data.channel_mean, targets=targets)
    curves[name] = (morf, lerf)
    print(f"{name:12s} LeRF - MoRF area {E.degradation_integral(morf, lerf):+.3f}")

# %%
plot_degradation(curves, out / "degradation.png", title="8x8 tiles")
print("wrote", out / "degradation.png")
