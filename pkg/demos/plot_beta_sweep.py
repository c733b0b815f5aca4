"""
How the information weight shapes the fit
=========================================

Sweeps beta*k over five decades and plots the mean information per feature
element and the class probability that survives the noise.
"""

from pathlib import Path


from iba.bottleneck import beta_depth_sweep, estimate_stats
from iba.data import ShapesDataset
from iba.export import plot_sweep
from iba.network import build_default_model, train

out = Path("demo_output")
out.mkdir(exist_ok=True)

data = ShapesDataset.generate(n_val=20, seed=0)
model, _ = train(build_default_model(data.config.classes, seed=0), data, epochs=3, seed=0)

# %%
# Two taps at different depths; each needs its own statistics.
taps = ["conv2", "conv3"]
stats = {t: estimate_stats(model, t, data.x_train[:500]) for t in taps}
rows = beta_depth_sweep(model, data.x_val[:10], data.y_val[:10], [0.1, 1, 10, 100, 1000], taps, stats)
for row in rows:
    print(f"{row['tap']}  beta*k={row['beta_over_k']:>7g}  info/k={row['info_per_k']:.3f}  p={row['class_prob']:.3f}")

# %%
plot_sweep(rows, out / "beta_sweep.png")
print("wrote", out / "beta_sweep.png")
