"""Writing heatmaps and evaluation curves to disk."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .bottleneck import Heatmap


def _viridis_lut() -> np.ndarray:
    from matplotlib import colormaps

    return (colormaps["viridis"](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)


def heatmap_to_rgb(values: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D grid to uint8 RGB through a fixed 256-entry viridis table."""
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if vmin is None else vmin
    hi = float(values.max()) if vmax is None else vmax
    if hi > lo:
        idx = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    else:
        idx = np.zeros_like(values)
    return _viridis_lut()[np.round(idx * 255).astype(np.int64)]


def write_heatmap_csv(path, values: np.ndarray) -> None:
    """H rows by W columns, comma separated, fixed precision."""
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.8e")


def read_heatmap_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def heatmap_sidecar(heatmap: Heatmap) -> dict:
    v = heatmap.values
    meta = {
        "method": heatmap.method,
        "beta_over_k": heatmap.beta,
        "tap": heatmap.tap,
        "units": heatmap.units,
        "total": heatmap.total,
        "min": float(v.min()),
        "max": float(v.max()),
        "shape": list(v.shape),
        "source_id": heatmap.source_id,
    }
    meta.update({k: (float(x) if isinstance(x, (np.floating, float)) else x) for k, x in heatmap.extra.items()})
    return meta


def export_heatmap(heatmap: Heatmap, stem) -> list[Path]:
    """Write ``stem.csv``, ``stem.png`` and ``stem.json``; returns the paths.

    The PNG is scaled between the map's min and max, both recorded in the
    sidecar.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, png_path, meta_path = (stem.with_suffix(s) for s in (".csv", ".png", ".json"))
    write_heatmap_csv(csv_path, heatmap.values)
    Image.fromarray(heatmap_to_rgb(heatmap.values), mode="RGB").save(png_path)
    meta_path.write_text(json.dumps(heatmap_sidecar(heatmap), indent=1, sort_keys=True) + "\n")
    return [csv_path, png_path, meta_path]


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_degradation(curves: dict, path, title: str = "") -> Path:
    """``curves`` maps method name to a (MoRF, LeRF) curve pair."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, (name, (morf, lerf)) in enumerate(curves.items()):
        color = f"C{i % 10}"
        ax.plot(morf.x, morf.y, color=color, label=f"{name} MoRF")
        ax.plot(lerf.x, lerf.y, color=color, linestyle="--", label=f"{name} LeRF")
    ax.set_xlabel("fraction of tiles removed")
    ax.set_ylabel("normalised score")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_sensitivity(curves: dict, path, title: str = "") -> Path:
    """``curves`` maps method name to a SensitivityCurve."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        ax.plot(c.n, c.corr, marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("pixels removed (n)")
    ax.set_ylabel("mean correlation")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_sweep(rows: list[dict], path) -> Path:
    """Information per element and class probability against beta, one line per tap."""
    plt = _figure()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 4))
    for tap in dict.fromkeys(r["tap"] for r in rows):
        sub = [r for r in rows if r["tap"] == tap]
        b = [r["beta_over_k"] for r in sub]
        a1.plot(b, [r["info_per_k"] for r in sub], marker="o", label=tap)
        a2.plot(b, [r["class_prob"] for r in sub], marker="o", label=tap)
    for ax, label in ((a1, "information per element (nats)"), (a2, "class probability")):
        ax.set_xscale("log")
        ax.set_xlabel("beta * k")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
    a1.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
