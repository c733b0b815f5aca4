"""Information bottleneck attribution.

A bottleneck replaces a feature map ``R`` at some tap by
``Z = lam * R + (1 - lam) * eps`` with ``eps ~ N(mu_R, sigma_R^2)``. The
information that still flows through each element is bounded by the KL
divergence between ``P(Z | R)`` and the Gaussian surrogate ``N(mu_R, sigma_R^2)``,
which has a closed form. Fitting ``lam`` to keep the classifier's target
score while paying for every nat that passes gives an attribution map.

Two ways of choosing ``lam`` are provided: optimise it per image
(:func:`per_sample_attribution`) or predict it with a small 1x1-conv network
trained over a dataset (:func:`train_readout`, :func:`readout_attribution`).

All information quantities are in nats internally and converted to bits
only when a :class:`Heatmap` is produced.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .network import LayerSpec, Model, TapPoint, _init_params, read_archive, write_archive
from .optim import Adam
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-5
LAMBDA_CLAMP = 1.0 - 1e-7
LN2 = math.log(2.0)


# ---- statistics ---------------------------------------------------------------


@dataclass
class FeatureStats:
    """Per-element mean and standard deviation of a tap's feature map."""

    mu: np.ndarray
    sigma: np.ndarray
    n_samples: int

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def save(self, path) -> None:
        write_archive(path, {"mu": self.mu, "sigma": self.sigma})

    @classmethod
    def load(cls, path) -> "FeatureStats":
        arrays = read_archive(path)
        return cls(arrays["mu"], arrays["sigma"], 0)


def estimate_stats(model: Model, tap: str, images: np.ndarray, batch_size: int = 64) -> FeatureStats:
    """Single pass over ``images`` with batch-wise merged (Chan) moments.

    The variance is unbiased (n - 1) and the std is floored at 1e-5.
    """
    m = len(images)
    if m < 2:
        raise ValueError(f"need at least 2 images to estimate feature statistics, got {m}")
    stop = model._tap_index(tap) + 1
    count = 0
    mean = m2 = None
    with no_grad():
        for i in range(0, m, batch_size):
            r = model.run(T.as_tensor(images[i : i + batch_size]), stop=stop).data.astype(np.float64)
            nb = len(r)
            bmean = r.mean(axis=0)
            bm2 = ((r - bmean) ** 2).sum(axis=0)
            if mean is None:
                count, mean, m2 = nb, bmean, bm2
                continue
            delta = bmean - mean
            total = count + nb
            mean = mean + delta * nb / total
            m2 = m2 + bm2 + delta**2 * count * nb / total
            count = total
    sigma = np.maximum(np.sqrt(m2 / (count - 1)), SIGMA_FLOOR)
    return FeatureStats(mean.astype(np.float32), sigma.astype(np.float32), count)


# ---- the bottleneck itself --------------------------------------------------------


@dataclass
class AlphaMask:
    """Unconstrained per-element parameters; ``lam = blur(sigma_s, sigmoid(alpha))``."""

    alpha: Tensor
    sigma_s: float = 1.0

    @classmethod
    def full(cls, shape, value: float = 5.0, sigma_s: float = 1.0) -> "AlphaMask":
        return cls(Tensor(np.full(shape, value), requires_grad=True), sigma_s)

    def lam(self) -> Tensor:
        return T.gaussian_blur(T.sigmoid(self.alpha), self.sigma_s)


def _as_lambda(mask) -> Tensor:
    return mask.lam() if isinstance(mask, AlphaMask) else T.as_tensor(mask)


def sample_noise(stats: FeatureStats, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent draws of eps ~ N(mu, sigma^2), one per feature element."""
    return rng.standard_normal((n,) + stats.shape) * stats.sigma + stats.mu


def bottleneck_forward(R, stats: FeatureStats, mask, seed=None, noise: np.ndarray | None = None) -> Tensor:
    """Noise-injected feature map ``lam * R + (1 - lam) * eps``.

    ``eps`` is drawn from ``seed`` unless given explicitly and is treated as
    a constant, so gradients flow to ``lam`` (and ``R``) only.
    """
    R = T.as_tensor(R)
    lam = _as_lambda(mask)
    if noise is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        noise = sample_noise(stats, R.shape[0], rng)
    eps = Tensor(noise)
    return lam * R + (1.0 - lam) * eps


def information_loss(R, stats: FeatureStats, mask) -> tuple[Tensor, Tensor]:
    """Closed-form ``KL(P(Z|R) || N(mu, sigma^2))`` in nats.

    Returns the total (summed over elements, averaged over any batch axis of
    ``R`` or ``lam``) and the per-element map averaged over the batch.
    ``lam`` is clamped below 1 - 1e-7 here only.
    """
    R = T.as_tensor(R)
    lam = T.clip(_as_lambda(mask), None, LAMBDA_CLAMP)
    r_norm = Tensor((R.data - stats.mu) / stats.sigma) if not R.requires_grad else (R - stats.mu) / stats.sigma
    # -ln(1-lam) + ((1-lam)^2 + lam^2 r'^2)/2 - 1/2, with the 1/2 cancelled against (1-lam)^2/2
    kl = -T.log1p(-lam) - lam + 0.5 * lam * lam * (1.0 + r_norm * r_norm)
    if kl.ndim == len(stats.shape) + 1:
        per_element = T.mean(kl, axis=0)
    else:
        per_element = kl
    return T.sum_axis(per_element), per_element


def kl_closed_form(lam, r_norm):
    """Scalar/array version of the per-element KL in nats (numpy only)."""
    lam = np.minimum(np.asarray(lam, dtype=np.float64), LAMBDA_CLAMP)
    r_norm = np.asarray(r_norm, dtype=np.float64)
    return -np.log1p(-lam) + ((1 - lam) ** 2 + lam**2 * r_norm**2) / 2 - 0.5


# ---- heatmaps ------------------------------------------------------------------------


@dataclass
class Heatmap:
    """Per-pixel attribution at image resolution.

    For bottleneck methods the unit is bits per pixel; baselines use their
    own relevance units.
    """

    values: np.ndarray
    method: str
    tap: str | None = None
    beta: float | None = None
    source_id: str | None = None
    units: str = "bits"
    extra: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def total(self) -> float:
        return float(self.values.sum(dtype=np.float64))


def kl_to_pixels(per_element: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    """Channel-summed KL (nats) -> bits per image pixel, conserving the total."""
    m = np.asarray(per_element, dtype=np.float64).sum(axis=0) / LN2
    m = np.maximum(m, 0.0)
    h, w = m.shape
    H, W = image_hw
    with T.default_dtype(np.float64):
        up = T.bilinear_resize(Tensor(m[None, None]), H, W).data[0, 0]
    return up * (h * w) / (H * W)


# ---- per-sample bottleneck -----------------------------------------------------------


@dataclass
class BottleneckConfig:
    """Hyperparameters of the per-sample fit.

    ``beta_over_k`` is the numerator of beta = beta_over_k / k where k is the
    number of elements at the tap.
    """

    beta_over_k: float = 10.0
    iterations: int = 10
    batch_copies: int = 10
    lr: float = 1.0
    sigma_s: float = 1.0
    target: str = "label"  # label | predicted
    seed: int = 0
    alpha_init: float = 5.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_copies < 1:
            raise ValueError(f"batch_copies must be >= 1, got {self.batch_copies}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.target not in ("label", "predicted"):
            raise ValueError(f"target must be 'label' or 'predicted', got {self.target!r}")


@dataclass
class FitResult:
    lam: np.ndarray
    per_element_kl: np.ndarray
    losses: list[float]
    class_prob: float
    initial_class_prob: float
    info_per_k: float
    target: int
    aborted: bool = False


def bottleneck_objective(
    model: Model,
    tap: str,
    stats: FeatureStats,
    R: Tensor,
    mask: AlphaMask,
    noise: np.ndarray,
    target: int,
    beta: float,
) -> tuple[Tensor, Tensor, Tensor]:
    """``CE(target) + beta * L_I`` for a batch of noisy copies of one feature map.

    ``R`` has shape (1, c, h, w); ``noise`` has one slice per copy.
    Returns (loss, cross-entropy, information in nats).
    """
    lam = mask.lam()
    lam4 = T.reshape(lam, (1,) + lam.shape)
    z = bottleneck_forward(T.broadcast_batch(R, len(noise)) if len(noise) > 1 else R, stats, lam4, noise=noise)
    logits = model.forward_from(tap, z)
    ce = T.cross_entropy(logits, np.full(len(noise), target))
    info, _ = information_loss(R.data[0], stats, lam)
    return ce + beta * info, ce, info


def _target_prob(model, tap, stats, R, lam, target, n, rng) -> float:
    with no_grad():
        z = bottleneck_forward(Tensor(np.repeat(R.data, n, axis=0)), stats, Tensor(lam[None]), seed=rng)
        p = T.softmax(model.forward_from(tap, z), axis=1).data[:, target]
    return float(p.mean())


def per_sample_attribution(
    model: Model,
    tap: str,
    stats: FeatureStats,
    image: np.ndarray,
    config: BottleneckConfig | None = None,
    label: int | None = None,
    source_id: str | None = None,
) -> tuple[Heatmap, FitResult]:
    """Fit ``alpha`` for one image and return its information heatmap.

    ``image`` has shape (C, H, W). The target is ``label`` when
    ``config.target == "label"`` and a label is given, else the model's
    prediction.
    """
    config = config or BottleneckConfig()
    image = np.asarray(image, dtype=np.float32)
    rng = np.random.default_rng(config.seed)
    with no_grad():
        R = model.run(Tensor(image[None]), stop=model._tap_index(tap) + 1)
        pred = int(model(image[None]).data.argmax())
    target = label if (config.target == "label" and label is not None) else pred
    shape = R.shape[1:]
    k = int(np.prod(shape))
    beta = config.beta_over_k / k

    mask = AlphaMask.full(shape, config.alpha_init, config.sigma_s)
    initial_prob = _target_prob(model, tap, stats, R, mask.lam().data, target, config.batch_copies, np.random.default_rng(config.seed + 1))
    opt = Adam([mask.alpha], lr=config.lr)
    losses = []
    aborted = False
    last_good = mask.alpha.data.copy()
    for _ in range(config.iterations):
        noise = sample_noise(stats, config.batch_copies, rng)
        opt.zero_grad()
        loss, _, _ = bottleneck_objective(model, tap, stats, R, mask, noise, target, beta)
        value = loss.item()
        if not math.isfinite(value):
            logger.warning("non-finite bottleneck loss; keeping the last finite mask")
            mask.alpha.data[...] = last_good
            aborted = True
            break
        last_good = mask.alpha.data.copy()
        losses.append(value)
        loss.backward()
        opt.step()

    with no_grad():
        lam = mask.lam().data
        _, per_element = information_loss(R.data[0], stats, lam)
    per_element = per_element.data
    prob = _target_prob(model, tap, stats, R, lam, target, config.batch_copies, np.random.default_rng(config.seed + 2))
    values = kl_to_pixels(per_element, image.shape[1:])
    heatmap = Heatmap(
        values, "per-sample", tap=tap, beta=config.beta_over_k, source_id=source_id,
        extra={"class_prob": prob, "target": target},
    )
    fit = FitResult(
        lam=lam, per_element_kl=per_element, losses=losses, class_prob=prob,
        initial_class_prob=initial_prob, info_per_k=float(per_element.sum(dtype=np.float64)) / k,
        target=target, aborted=aborted,
    )
    return heatmap, fit


# ---- readout bottleneck ----------------------------------------------------------------


class ReadoutNet:
    """Three 1x1 convolutions (ReLU between, sigmoid at the end) predicting lam.

    Inputs are the feature maps of ``read_taps`` resized to the bottleneck
    tap's spatial size, standardised per channel and concatenated.
    """

    def __init__(
        self,
        read_taps: Sequence[str],
        tap: TapPoint,
        in_channels: int,
        hidden: int = 32,
        sigma_s: float = 1.0,
        seed: int = 0,
    ):
        self.read_taps = list(read_taps)
        self.tap = tap
        self.sigma_s = sigma_s
        self.stats: FeatureStats | None = None
        self.beta_over_k: float | None = None
        self.in_mean = np.zeros(in_channels, np.float32)
        self.in_std = np.ones(in_channels, np.float32)
        rng = np.random.default_rng(seed)
        out_ch = tap.shape[0]
        self.params: dict[str, Tensor] = {}
        for i, (cin, cout) in enumerate([(in_channels, hidden), (hidden, hidden), (hidden, out_ch)], 1):
            p = _init_params(LayerSpec(f"readout{i}", "conv", cin, cout, 1), rng)
            self.params[f"readout{i}.weight"] = Tensor(p["weight"], requires_grad=True)
            self.params[f"readout{i}.bias"] = Tensor(p["bias"], requires_grad=True)

    def collect(self, model: Model, x: np.ndarray) -> tuple[Tensor, Tensor]:
        """First pass: (readout input, bottleneck feature map R), no noise."""
        taps = list(dict.fromkeys(self.read_taps + [self.tap.name]))
        with no_grad():
            _, feats = model.features(x, taps)
            h, w = self.tap.shape[1:]
            parts = []
            for name in self.read_taps:
                f = feats[name]
                if f.shape[2:] != (h, w):
                    f = T.bilinear_resize(f, h, w)
                parts.append(f.data)
            inp = np.concatenate(parts, axis=1)
            inp = (inp - self.in_mean[None, :, None, None]) / self.in_std[None, :, None, None]
        R = feats[self.tap.name]
        if R.shape[1:] != self.tap.shape:
            raise T.ShapeError(f"tap {self.tap.name} has shape {R.shape[1:]}, expected {self.tap.shape}")
        return Tensor(inp), R

    def __call__(self, inp: Tensor) -> Tensor:
        x = inp
        for i in (1, 2, 3):
            x = T.conv2d(x, self.params[f"readout{i}.weight"], self.params[f"readout{i}.bias"])
            x = T.relu(x) if i < 3 else T.sigmoid(x)
        return T.gaussian_blur(x, self.sigma_s)

    def lam(self, model: Model, x: np.ndarray) -> tuple[Tensor, Tensor]:
        inp, R = self.collect(model, x)
        return self(inp), R

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["in_mean"] = self.in_mean
        out["in_std"] = self.in_std
        if self.stats is not None:
            out["mu"], out["sigma"] = self.stats.mu, self.stats.sigma
        return out


def train_readout(
    model: Model,
    read_taps: Sequence[str],
    tap: str,
    stats: FeatureStats,
    dataset,
    epochs: int = 10,
    lr: float = 1e-5,
    beta_over_k: float = 10.0,
    seed: int = 0,
    batch_size: int = 16,
    sigma_s: float = 1.0,
    hidden: int = 32,
    max_images: int | None = None,
) -> tuple[ReadoutNet, list[dict]]:
    """Fit a :class:`ReadoutNet` on the training split with the model frozen."""
    point = model.tap(tap)
    x, y = dataset.x_train, dataset.y_train
    if max_images is not None:
        x, y = x[:max_images], y[:max_images]
    head = x[: min(len(x), 256)]
    in_ch = sum(model.tap(n).shape[0] for n in read_taps)
    net = ReadoutNet(read_taps, point, in_ch, hidden=hidden, sigma_s=sigma_s, seed=seed)
    net.stats, net.beta_over_k = stats, beta_over_k
    # standardise readout inputs with statistics of the first images
    inp, _ = net.collect(model, head)
    net.in_mean = inp.data.mean(axis=(0, 2, 3)).astype(np.float32)
    net.in_std = np.maximum(inp.data.std(axis=(0, 2, 3)), 1e-5).astype(np.float32)

    beta = beta_over_k / point.k
    opt = Adam(net.params.values(), lr=lr)
    rng = np.random.default_rng(seed)
    log = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        tot = tot_info = tot_prob = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            inp, R = net.collect(model, x[idx])
            opt.zero_grad()
            lam = net(inp)
            z = bottleneck_forward(R, stats, lam, seed=rng)
            logits = model.forward_from(tap, z)
            ce = T.cross_entropy(logits, y[idx])
            info, _ = information_loss(R, stats, lam)
            loss = ce + beta * info
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite readout loss at epoch {epoch}")
            loss.backward()
            opt.step()
            tot += value * len(idx)
            tot_info += info.item() * len(idx)
            tot_prob += float(T.softmax(logits, axis=1).data[np.arange(len(idx)), y[idx]].sum())
        entry = {"epoch": epoch, "loss": tot / len(x), "info_per_k": tot_info / len(x) / point.k, "class_prob": tot_prob / len(x)}
        logger.info("readout epoch %d %s", epoch, entry)
        log.append(entry)
    return net, log


def readout_attribution(net: ReadoutNet, model: Model, image: np.ndarray, source_id: str | None = None) -> Heatmap:
    """Heatmap from one collect pass and the readout network; no optimisation.

    The KL depends only on ``lam`` and ``R``, so no noise is sampled and the
    result is deterministic.
    """
    if net.stats is None:
        raise ValueError("readout network has no feature statistics; train it first")
    image = np.asarray(image, dtype=np.float32)
    with no_grad():
        lam, R = net.lam(model, image[None])
        _, per_element = information_loss(R.data[0], net.stats, lam.data[0])
    return Heatmap(
        kl_to_pixels(per_element.data, image.shape[1:]), "readout",
        tap=net.tap.name, beta=net.beta_over_k, source_id=source_id,
    )


def save_readout(net: ReadoutNet, path) -> None:
    write_archive(path, net.state())
    meta = {
        "read_taps": net.read_taps, "tap": net.tap.name, "tap_shape": list(net.tap.shape),
        "sigma_s": net.sigma_s, "beta_over_k": net.beta_over_k,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_readout(path) -> ReadoutNet:
    meta = json.loads(Path(str(path) + ".json").read_text())
    arrays = read_archive(path)
    w1 = arrays["readout1.weight"]
    net = ReadoutNet(
        meta["read_taps"], TapPoint(meta["tap"], tuple(meta["tap_shape"])), w1.shape[1],
        hidden=w1.shape[0], sigma_s=meta["sigma_s"],
    )
    for key in net.params:
        net.params[key] = Tensor(arrays[key], requires_grad=True)
    net.in_mean, net.in_std = arrays["in_mean"], arrays["in_std"]
    net.stats = FeatureStats(arrays["mu"], arrays["sigma"], 0)
    net.beta_over_k = meta["beta_over_k"]
    return net


# ---- sweeps ---------------------------------------------------------------------------------


def beta_depth_sweep(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    betas: Sequence[float],
    taps: Sequence[str],
    stats: dict[str, FeatureStats],
    config: BottleneckConfig | None = None,
) -> list[dict]:
    """Mean information per element and post-fit target probability per (beta, tap).

    ``betas`` are beta*k values (e.g. 10 for beta = 10/k).
    """
    config = config or BottleneckConfig()
    rows = []
    for tap in taps:
        for b in betas:
            cfg = replace(config, beta_over_k=float(b))
            info, prob = [], []
            for img, lab in zip(images, labels):
                _, fit = per_sample_attribution(model, tap, stats[tap], img, cfg, label=int(lab))
                info.append(fit.info_per_k)
                prob.append(fit.class_prob)
            rows.append({
                "beta_over_k": float(b), "tap": tap,
                "info_per_k": float(np.mean(info)), "class_prob": float(np.mean(prob)),
            })
    return rows
