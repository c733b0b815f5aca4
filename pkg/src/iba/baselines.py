"""Reference attribution methods and a uniform wrapper around all methods.

Every function returns a :class:`~iba.bottleneck.Heatmap` with the image's
spatial shape. Relevance units are method specific.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .bottleneck import (
    BottleneckConfig,
    FeatureStats,
    Heatmap,
    ReadoutNet,
    estimate_stats,
    per_sample_attribution,
    readout_attribution,
)
from .network import Model
from .tensor import Tensor, no_grad


def _onehot(n: int, classes: int, target: int) -> np.ndarray:
    g = np.zeros((n, classes), dtype=T.get_default_dtype())
    g[:, target] = 1.0
    return g


def input_gradients(model: Model, x: np.ndarray, target: int, relu: Callable = T.relu) -> np.ndarray:
    """d logit_target / d input for a batch ``x`` of shape (N, C, H, W)."""
    xt = Tensor(x, requires_grad=True)
    logits = model(xt, relu=relu)
    logits.backward(_onehot(len(x), logits.shape[1], target))
    return xt.grad


def random_attribution(image: np.ndarray, seed: int = 0) -> Heatmap:
    rng = np.random.default_rng(seed)
    return Heatmap(rng.uniform(0.0, 1.0, image.shape[1:]), "random", units="relevance")


def gradient_map(model: Model, image: np.ndarray, target: int) -> Heatmap:
    """Signed input gradient summed over channels."""
    g = input_gradients(model, image[None], target)[0]
    return Heatmap(g.sum(axis=0).astype(np.float64), "gradient", units="relevance")


def saliency(model: Model, image: np.ndarray, target: int) -> Heatmap:
    """Maximum absolute input gradient over channels."""
    g = input_gradients(model, image[None], target)[0]
    return Heatmap(np.abs(g).max(axis=0).astype(np.float64), "saliency", units="relevance")


def smoothgrad(
    model: Model,
    image: np.ndarray,
    target: int,
    n: int = 50,
    noise_frac: float = 0.15,
    seed: int = 0,
    batch_size: int = 25,
) -> Heatmap:
    """Mean saliency over ``n`` copies perturbed with N(0, (noise_frac * range)^2)."""
    rng = np.random.default_rng(seed)
    sigma = noise_frac * float(image.max() - image.min())
    total = np.zeros(image.shape[1:], np.float64)
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        noisy = image[None] + sigma * rng.standard_normal((m,) + image.shape)
        g = input_gradients(model, noisy.astype(np.float32), target)
        total += np.abs(g).max(axis=1).sum(axis=0)
    return Heatmap(total / n, "smoothgrad", units="relevance")


def integrated_gradients(
    model: Model,
    image: np.ndarray,
    target: int,
    steps: int = 50,
    baseline: np.ndarray | None = None,
    batch_size: int = 25,
) -> Heatmap:
    """(x - baseline) times the mean gradient on the straight path, channel-summed.

    Gradients are taken at the midpoints of ``steps`` equal path segments.
    """
    baseline = np.zeros_like(image) if baseline is None else baseline
    diff = image - baseline
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros(image.shape, np.float64)
    for start in range(0, steps, batch_size):
        a = alphas[start : start + batch_size]
        path = baseline[None] + a[:, None, None, None] * diff[None]
        total += input_gradients(model, path.astype(np.float32), target).sum(axis=0)
    attr = diff * total / steps
    return Heatmap(attr.sum(axis=0), "integrated-gradients", units="relevance")


def occlusion(
    model: Model,
    image: np.ndarray,
    target: int,
    patch: int = 8,
    stride: int | None = None,
    batch_size: int = 64,
) -> Heatmap:
    """Drop of the target logit when a patch is set to zero.

    Every pixel of a patch receives the patch's drop; with overlapping
    patches a pixel gets the mean over the patches covering it.
    """
    stride = stride or patch
    _, H, W = image.shape
    if patch > min(H, W):
        raise ValueError(f"patch {patch} larger than image {H}x{W}")
    with no_grad():
        base = float(model(image[None]).data[0, target])
    corners = [(y, x) for y in range(0, H - patch + stride, stride) for x in range(0, W - patch + stride, stride)
               if y < H and x < W]
    drops = []
    for start in range(0, len(corners), batch_size):
        chunk = corners[start : start + batch_size]
        batch = np.repeat(image[None], len(chunk), axis=0)
        for b, (y, x) in enumerate(chunk):
            batch[b, :, y : y + patch, x : x + patch] = 0.0
        with no_grad():
            drops.extend(base - model(batch).data[:, target])
    total = np.zeros((H, W), np.float64)
    count = np.zeros((H, W), np.float64)
    for (y, x), d in zip(corners, drops):
        total[y : y + patch, x : x + patch] += d
        count[y : y + patch, x : x + patch] += 1
    return Heatmap(total / np.maximum(count, 1), f"occlusion{patch}", units="relevance")


def grad_cam(model: Model, image: np.ndarray, target: int, tap: str | None = None) -> Heatmap:
    """ReLU of the gradient-weighted sum of the tap's channels, resized to the image."""
    tap = tap or model.tap_names[-1]
    with no_grad():
        A = model.run(Tensor(image[None]), stop=model._tap_index(tap) + 1)
    A.requires_grad = True
    logits = model.forward_from(tap, A)
    logits.backward(_onehot(1, logits.shape[1], target))
    weights = A.grad[0].mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * A.data[0]).sum(axis=0), 0.0)
    with T.default_dtype(np.float64):
        up = T.bilinear_resize(Tensor(cam[None, None]), *image.shape[1:]).data[0, 0]
    return Heatmap(up, "grad-cam", tap=tap, units="relevance")


def guided_backprop(model: Model, image: np.ndarray, target: int) -> Heatmap:
    """Input gradient with ReLUs that also block negative upstream gradients."""
    g = input_gradients(model, image[None], target, relu=T.guided_relu)[0]
    return Heatmap(g.sum(axis=0).astype(np.float64), "guided-backprop", units="relevance")


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def guided_grad_cam(model: Model, image: np.ndarray, target: int, tap: str | None = None) -> Heatmap:
    gb = guided_backprop(model, image, target).values
    cam = grad_cam(model, image, target, tap).values
    return Heatmap(minmax(gb) * minmax(cam), "guided-grad-cam", units="relevance")


# ---- uniform wrapper ------------------------------------------------------------


@dataclass
class AttributionMethod:
    """A named attribution method bound to its settings.

    ``fn(model, image, target, seed)`` returns a :class:`Heatmap`. The model
    is passed at call time so the same method can be re-run on a randomised
    copy of the network.
    """

    name: str
    fn: Callable[[Model, np.ndarray, int, int], Heatmap]
    deterministic: bool = True
    seed: int = 0
    uses_model: bool = True

    def __call__(self, model: Model, image: np.ndarray, target: int, seed: int | None = None) -> Heatmap:
        h = self.fn(model, image, int(target), self.seed if seed is None else seed)
        h.method = self.name
        if h.values.shape != image.shape[1:]:
            raise T.ShapeError(f"{self.name} produced {h.values.shape}, expected {image.shape[1:]}")
        return h


@dataclass
class _StatsCache:
    """Feature statistics per model instance, estimated on demand."""

    tap: str
    images: np.ndarray
    known: dict = field(default_factory=dict)

    def get(self, model: Model) -> FeatureStats:
        key = id(model)
        entry = self.known.get(key)
        if entry is None or entry[0] is not model:
            entry = (model, estimate_stats(model, self.tap, self.images))
            self.known[key] = entry
        return entry[1]


def per_sample_method(
    tap: str,
    stats_images: np.ndarray,
    config: BottleneckConfig | None = None,
    stats: FeatureStats | None = None,
    model: Model | None = None,
    name: str = "per-sample",
) -> AttributionMethod:
    """Per-sample bottleneck as an :class:`AttributionMethod`.

    Statistics are estimated from ``stats_images`` for each model the method
    is called with; pass ``stats`` together with ``model`` to seed the cache.
    """
    config = config or BottleneckConfig()
    cache = _StatsCache(tap, stats_images)
    if stats is not None and model is not None:
        cache.known[id(model)] = (model, stats)

    def fn(m, image, target, seed):
        cfg = BottleneckConfig(**{**config.__dict__, "seed": seed})
        heat, _ = per_sample_attribution(m, tap, cache.get(m), image, cfg, label=target)
        return heat

    return AttributionMethod(name, fn, seed=config.seed)


def readout_method(net: ReadoutNet, name: str = "readout") -> AttributionMethod:
    return AttributionMethod(name, lambda m, image, target, seed: readout_attribution(net, m, image))


def make_method(name: str, **ctx) -> AttributionMethod:
    """Build a method by name.

    Known names: random, gradient, saliency, smoothgrad, integrated-gradients,
    occlusion8, occlusion14, grad-cam, guided-backprop, guided-grad-cam,
    per-sample (needs ``tap`` and ``stats_images``), readout (needs ``net``).
    """
    seed = ctx.get("seed", 0)
    simple = {
        "gradient": gradient_map,
        "saliency": saliency,
        "grad-cam": grad_cam,
        "guided-backprop": guided_backprop,
        "guided-grad-cam": guided_grad_cam,
    }
    if name == "random":
        return AttributionMethod(name, lambda m, img, t, s: random_attribution(img, s), seed=seed, uses_model=False)
    if name in simple:
        f = simple[name]
        return AttributionMethod(name, lambda m, img, t, s: f(m, img, t))
    if name == "smoothgrad":
        return AttributionMethod(name, lambda m, img, t, s: smoothgrad(m, img, t, seed=s), seed=seed)
    if name == "integrated-gradients":
        return AttributionMethod(name, lambda m, img, t, s: integrated_gradients(m, img, t))
    if name.startswith("occlusion"):
        patch = int(name[len("occlusion"):] or 8)
        return AttributionMethod(name, lambda m, img, t, s: occlusion(m, img, t, patch=patch))
    if name == "per-sample":
        return per_sample_method(
            ctx["tap"], ctx["stats_images"], ctx.get("config"), ctx.get("stats"), ctx.get("model"),
        )
    if name == "readout":
        return readout_method(ctx["net"])
    raise KeyError(f"unknown attribution method {name!r}")


METHOD_NAMES = (
    "random", "gradient", "saliency", "smoothgrad", "integrated-gradients", "occlusion8",
    "occlusion14", "grad-cam", "guided-backprop", "guided-grad-cam", "per-sample", "readout",
)
