"""Quantitative attribution metrics.

* degradation: remove tiles most-relevant-first (MoRF) or least-relevant-first
  (LeRF) and integrate the gap between the two normalised score curves;
* Sensitivity-n: correlation between removed attribution mass and logit drop;
* bounding box: fraction of the top-n pixels that land in the object's box;
* sanity check: SSIM between heatmaps of the trained and a progressively
  randomised network.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import Model, cascade_order, randomize_from


# ---- degradation ----------------------------------------------------------------


@dataclass
class DegradationCurve:
    direction: str  # morf | lerf
    tile: int
    x: np.ndarray
    y: np.ndarray
    t1: float = float("nan")
    b: float = float("nan")

    @property
    def first_step_drop(self) -> float:
        return float(self.y[0] - self.y[1])


def tile_scores(heatmap: np.ndarray, tile: int) -> np.ndarray:
    """Sum of heatmap values per tile, row-major; partial edge tiles included."""
    H, W = heatmap.shape
    gh, gw = math.ceil(H / tile), math.ceil(W / tile)
    padded = np.zeros((gh * tile, gw * tile), np.float64)
    padded[:H, :W] = heatmap
    return padded.reshape(gh, tile, gw, tile).sum(axis=(1, 3)).ravel()


def tile_order(heatmap: np.ndarray, tile: int, direction: str) -> np.ndarray:
    """Tile indices in removal order; ties keep row-major order."""
    scores = tile_scores(heatmap, tile)
    if direction == "morf":
        return np.argsort(-scores, kind="stable")
    if direction == "lerf":
        return np.argsort(scores, kind="stable")
    raise ValueError(f"direction must be 'morf' or 'lerf', got {direction!r}")


def _tile_slices(index: int, tile: int, W: int):
    gw = math.ceil(W / tile)
    r, c = divmod(int(index), gw)
    return slice(r * tile, (r + 1) * tile), slice(c * tile, (c + 1) * tile)


def _probs(model: Model, x: np.ndarray, targets: np.ndarray, batch_size: int = 256) -> np.ndarray:
    p = model.predict_proba(x, batch_size)
    return p[np.arange(len(x)), targets]


def degradation_curve(
    model: Model,
    images: np.ndarray,
    heatmaps: Sequence[np.ndarray],
    tile: int,
    direction: str,
    fill: np.ndarray | None = None,
    targets: np.ndarray | None = None,
) -> DegradationCurve:
    """Normalised target score while tiles are replaced one by one.

    ``fill`` is the per-channel constant that replaces a tile (default zero,
    pass the dataset channel mean). ``targets`` defaults to the model's
    top-1 prediction on each intact image, so the first point is exactly 1
    and the fully degraded point exactly 0.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) != len(heatmaps):
        raise ValueError(f"{len(images)} images but {len(heatmaps)} heatmaps")
    n, C, H, W = images.shape
    fill = np.zeros(C, np.float32) if fill is None else np.asarray(fill, np.float32).reshape(C)
    probs0 = model.predict_proba(images)
    if targets is None:
        targets = probs0.argmax(axis=1)
    targets = np.asarray(targets)
    t1 = float(probs0.max(axis=1).mean())
    blank = np.broadcast_to(fill[None, :, None, None], images.shape).astype(np.float32)
    b = float(_probs(model, blank, targets).mean())
    denom = t1 - b

    orders = np.stack([tile_order(np.asarray(h), tile, direction) for h in heatmaps])
    n_tiles = orders.shape[1]
    work = images.copy()
    ys = [float(((probs0[np.arange(n), targets] - b) / denom).mean())]
    for step in range(n_tiles):
        for i in range(n):
            rs, cs = _tile_slices(orders[i, step], tile, W)
            work[i, :, rs, cs] = fill[:, None, None]
        ys.append(float(((_probs(model, work, targets) - b) / denom).mean()))
    x = np.arange(n_tiles + 1) / n_tiles
    return DegradationCurve(direction, tile, x, np.array(ys), t1, b)


def degradation_integral(morf: DegradationCurve, lerf: DegradationCurve) -> float:
    """Trapezoidal area between the LeRF and MoRF curves."""
    if morf.x.shape != lerf.x.shape or not np.allclose(morf.x, lerf.x):
        raise ValueError("MoRF and LeRF curves are on different grids")
    d = lerf.y - morf.y
    return float(np.sum((d[1:] + d[:-1]) * np.diff(morf.x)) / 2)


# ---- Sensitivity-n ------------------------------------------------------------------


def default_n_grid(image_hw: tuple[int, int], tile: int, points: int = 8) -> np.ndarray:
    """Log-spaced pixel counts from one tile to 80% of the image."""
    H, W = image_hw
    return np.unique(np.round(np.geomspace(tile * tile, 0.8 * H * W, points)).astype(int))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0 when either side has no variance."""
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den <= 1e-12 * max(1.0, float(np.abs(a).max(initial=0)) * float(np.abs(b).max(initial=0))):
        return 0.0
    return float((a * b).sum() / den)


@dataclass
class SensitivityCurve:
    tile: int
    n: np.ndarray
    corr: np.ndarray
    per_image: np.ndarray = field(repr=False, default=None)


def sensitivity_n(
    model: Model,
    images: np.ndarray,
    heatmaps: Sequence[np.ndarray],
    n_grid: Sequence[int] | None = None,
    sets_per_n: int = 100,
    tile: int = 8,
    targets: np.ndarray | None = None,
    seed: int = 0,
) -> SensitivityCurve:
    """Mean (over images) Pearson correlation between removed attribution and logit drop.

    For each pixel count n, ``sets_per_n`` random sets of distinct tiles with
    about n pixels in total are zeroed. The tile count is n / tile^2
    rounded to the nearest integer, at least 1.
    """
    images = np.asarray(images, dtype=np.float32)
    n_img, C, H, W = images.shape
    if len(heatmaps) != n_img:
        raise ValueError(f"{n_img} images but {len(heatmaps)} heatmaps")
    if n_grid is None:
        n_grid = default_n_grid((H, W), tile)
    n_grid = np.asarray(n_grid)
    logits0 = model.logits(images)
    if targets is None:
        targets = logits0.argmax(axis=1)
    rng = np.random.default_rng(seed)
    gh, gw = math.ceil(H / tile), math.ceil(W / tile)
    total_tiles = gh * gw
    tile_mask = np.zeros((total_tiles, H, W), bool)
    for t in range(total_tiles):
        rs, cs = _tile_slices(t, tile, W)
        tile_mask[t, rs, cs] = True
    out = np.zeros((len(n_grid), n_img))
    for j, n in enumerate(n_grid):
        k = int(min(max(1, round(n / (tile * tile))), total_tiles))
        for i in range(n_img):
            scores = tile_scores(np.asarray(heatmaps[i], np.float64), tile)
            sets = np.stack([rng.choice(total_tiles, k, replace=False) for _ in range(sets_per_n)])
            masks = tile_mask[sets].any(axis=1)  # sets_per_n, H, W
            batch = np.repeat(images[i : i + 1], sets_per_n, axis=0)
            batch[np.broadcast_to(masks[:, None], batch.shape)] = 0.0
            drops = logits0[i, targets[i]] - model.logits(batch)[:, targets[i]]
            removed = scores[sets].sum(axis=1)
            out[j, i] = pearson(removed, drops)
    return SensitivityCurve(tile, n_grid, out.mean(axis=1), out)


# ---- bounding box -------------------------------------------------------------------


def bbox_ratio(heatmap: np.ndarray, box: Sequence[int]) -> float:
    """Share of the n highest-scored pixels inside a box of n pixels.

    ``box`` is (x, y, w, h) with a top-left origin. Ties are broken by
    row-major pixel index.
    """
    heatmap = np.asarray(heatmap)
    x, y, w, h = (int(v) for v in box)
    H, W = heatmap.shape
    if w < 1 or h < 1:
        raise ValueError(f"empty box {tuple(box)}")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"box {tuple(box)} outside the {H}x{W} heatmap")
    n = w * h
    top = np.argsort(-heatmap.ravel(), kind="stable")[:n]
    rows, cols = np.divmod(top, W)
    inside = (rows >= y) & (rows < y + h) & (cols >= x) & (cols < x + w)
    return float(inside.sum() / n)


# ---- SSIM and the sanity check ----------------------------------------------------------------


def _window_means(a: np.ndarray, win: int) -> np.ndarray:
    """Mean of every valid win x win window."""
    c = np.pad(np.cumsum(np.cumsum(a, axis=0), axis=1), ((1, 0), (1, 0)))
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 5, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid uniform windows (sample covariance)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"images {a.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    npx = window * window
    cov_norm = npx / (npx - 1)
    ux, uy = _window_means(a, window), _window_means(b, window)
    uxx, uyy, uxy = _window_means(a * a, window), _window_means(b * b, window), _window_means(a * b, window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def percentile_normalize(h: np.ndarray, lo: float = 1.0, hi: float = 99.0) -> np.ndarray:
    """Clamp to the [lo, hi] percentiles and rescale to [0, 1]."""
    h = np.asarray(h, np.float64)
    a, b = np.percentile(h, [lo, hi])
    if b - a <= 0:
        return np.zeros_like(h)
    return (np.clip(h, a, b) - a) / (b - a)


@dataclass
class SanityResult:
    layers: list[str]
    ssim: list[float]


def sanity_check(
    model: Model,
    method,
    images: np.ndarray,
    targets: np.ndarray,
    layers: Sequence[str] | None = None,
    seed: int = 0,
) -> SanityResult:
    """Mean SSIM between original and cascading-randomised heatmaps.

    The first entry ("none") compares the original heatmaps with themselves.
    Each following entry randomises one more layer, starting at the output.
    """
    layers = list(layers) if layers is not None else cascade_order(model)
    original = [percentile_normalize(method(model, img, t).values) for img, t in zip(images, targets)]
    names = ["none"]
    scores = [float(np.mean([ssim(h, h) for h in original]))]
    for depth, layer in enumerate(layers):
        # randomize_from re-draws this layer and everything after it
        current = randomize_from(model, layer, seed + depth)
        vals = []
        for img, t, h0 in zip(images, targets, original):
            h1 = percentile_normalize(method(current, img, t).values)
            vals.append(ssim(h0, h1))
        names.append(layer)
        scores.append(float(np.mean(vals)))
    return SanityResult(names, scores)


# ---- report ----------------------------------------------------------------------------------


@dataclass
class MethodScores:
    degradation: dict[int, float] = field(default_factory=dict)
    curves: dict[int, tuple[DegradationCurve, DegradationCurve]] = field(default_factory=dict)
    sensitivity: SensitivityCurve | None = None
    bbox: float | None = None
    sanity: SanityResult | None = None


@dataclass
class EvalReport:
    methods: dict[str, MethodScores] = field(default_factory=dict)

    def __getitem__(self, name: str) -> MethodScores:
        return self.methods.setdefault(name, MethodScores())

    def tiles(self) -> list[int]:
        return sorted({t for m in self.methods.values() for t in m.degradation})

    def to_tsv(self) -> str:
        tiles = self.tiles()
        header = ["method"] + [f"deg_{t}x{t}" for t in tiles] + ["bbox", "sensitivity_n_mean", "sanity_ssim_min"]
        lines = ["\t".join(header)]
        for name, m in self.methods.items():
            row = [name]
            row += [_fmt(m.degradation.get(t)) for t in tiles]
            row.append(_fmt(m.bbox))
            row.append(_fmt(None if m.sensitivity is None else float(np.mean(m.sensitivity.corr))))
            row.append(_fmt(None if m.sanity is None else min(m.sanity.ssim)))
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def write(self, outdir) -> list[Path]:
        """TSV summary plus one CSV per curve; returns the written paths."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = [outdir / "report.tsv"]
        written[0].write_text(self.to_tsv())
        for name, m in self.methods.items():
            for t, (morf, lerf) in m.curves.items():
                p = outdir / f"degradation_{name}_{t}.csv"
                _write_rows(p, ["fraction", "morf", "lerf"], zip(morf.x, morf.y, lerf.y))
                written.append(p)
            if m.sensitivity is not None:
                p = outdir / f"sensitivity_{name}_{m.sensitivity.tile}.csv"
                _write_rows(p, ["n", "corr"], zip(m.sensitivity.n, m.sensitivity.corr))
                written.append(p)
            if m.sanity is not None:
                p = outdir / f"sanity_{name}.csv"
                _write_rows(p, ["randomized_from", "ssim"], zip(m.sanity.layers, m.sanity.ssim))
                written.append(p)
        return written


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else f"{float(v):.8g}" for v in r])
