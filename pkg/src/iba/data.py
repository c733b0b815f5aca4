"""Procedural shapes dataset with exact bounding boxes.

Each image shows one shape (disk, square, triangle, cross or ring) at a random
position over a textured noise background. The shape determines the class,
and the tight box around its pixels is the ground-truth localisation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "triangle", "cross", "ring")
MAX_BOX_FRACTION = 0.33


@dataclass(frozen=True)
class DatasetConfig:
    classes: int = 5
    image_size: int = 64
    channels: int = 1
    n_train: int = 4000
    n_val: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= len(SHAPES):
            raise ValueError(f"classes must be in [2, {len(SHAPES)}], got {self.classes}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be at least 32, got {self.image_size}")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "DatasetConfig":
        values = parse_key_values(text)
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in values.items()})

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Boolean mask of a shape with centre (cx, cy) and half-extent r."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        t = r / 3
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (9, 9))
    # bilinear upsample of a coarse grid gives smooth blotches
    t = np.linspace(0, 8, size)
    i0 = np.minimum(t.astype(int), 7)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    smooth = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return 0.4 + 0.12 * smooth + rng.normal(0.0, 0.08, (size, size))


def render_sample(rng: np.random.Generator, label: int, size: int, channels: int):
    """Draw one raw image in roughly [0, 1] and its (x, y, w, h) box."""
    r = rng.uniform(0.14, 0.27) * size
    margin = r + 1
    cx = rng.uniform(margin, size - 1 - margin)
    cy = rng.uniform(margin, size - 1 - margin)
    mask = shape_mask(SHAPES[label], size, cx, cy, r)
    contrast = rng.uniform(0.35, 0.6)
    gray = _texture(rng, size)
    if channels == 1:
        img = gray[None]
        img = img + contrast * mask[None]
    else:
        tint = rng.uniform(0.5, 1.0, 3)
        img = np.repeat(gray[None], 3, axis=0) + contrast * tint[:, None, None] * mask[None]
    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return img.astype(np.float32), box


@dataclass
class ShapesDataset:
    """Normalised train/val arrays plus the boxes of every image.

    Images are stored per-channel standardised with the training-set mean and
    std (``norm_mean``, ``norm_std``), so zero is the mean grey value.
    """

    config: DatasetConfig
    x_train: np.ndarray
    y_train: np.ndarray
    box_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    box_val: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray

    @classmethod
    def generate(cls, config: DatasetConfig | None = None, **overrides) -> "ShapesDataset":
        config = config or DatasetConfig()
        if overrides:
            config = dataclasses.replace(config, **overrides)
        rng = np.random.default_rng(config.seed)
        total = config.n_train + config.n_val
        labels = np.arange(total) % config.classes
        rng.shuffle(labels)
        images = np.empty((total, config.channels, config.image_size, config.image_size), np.float32)
        boxes = np.empty((total, 4), np.int64)
        for i, label in enumerate(labels):
            images[i], boxes[i] = render_sample(rng, int(label), config.image_size, config.channels)
        n = config.n_train
        mean = images[:n].mean(axis=(0, 2, 3))
        std = images[:n].std(axis=(0, 2, 3))
        images = (images - mean[None, :, None, None]) / std[None, :, None, None]
        return cls(
            config,
            images[:n], labels[:n].astype(np.int64), boxes[:n],
            images[n:], labels[n:].astype(np.int64), boxes[n:],
            mean.astype(np.float32), std.astype(np.float32),
        )

    @property
    def channel_mean(self) -> np.ndarray:
        """Per-channel mean of the training images in normalised space."""
        return self.x_train.mean(axis=(0, 2, 3))

    def split(self, name: str):
        if name == "train":
            return self.x_train, self.y_train, self.box_train
        if name == "val":
            return self.x_val, self.y_val, self.box_val
        raise ValueError(f"unknown split {name!r}")

    def save(self, path) -> None:
        arrays = {k: getattr(self, k) for k in _ARRAY_FIELDS}
        arrays["config"] = np.frombuffer(self.config.to_text().encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ShapesDataset":
        with np.load(path) as z:
            config = DatasetConfig.from_text(bytes(z["config"]).decode())
            return cls(config, **{k: z[k] for k in _ARRAY_FIELDS})

    def content_hash(self) -> str:
        h = hashlib.sha256(self.config.to_text().encode())
        for k in _ARRAY_FIELDS:
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        return h.hexdigest()


_ARRAY_FIELDS = ("x_train", "y_train", "box_train", "x_val", "y_val", "box_val", "norm_mean", "norm_std")


def write_boxes(path, boxes: np.ndarray, ids=None) -> None:
    """One ``image_id, x, y, w, h`` record per line."""
    ids = range(len(boxes)) if ids is None else ids
    with open(path, "w") as fh:
        for i, (x, y, w, h) in zip(ids, boxes):
            fh.write(f"{i}, {x}, {y}, {w}, {h}\n")


def read_boxes(path) -> dict[str, tuple[int, int, int, int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, *coords = (p.strip() for p in line.split(","))
        if len(coords) != 4:
            raise ValueError(f"bad box record: {line!r}")
        out[image_id] = tuple(int(c) for c in coords)
    return out


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST container format) into a numpy array."""
    data = Path(path).read_bytes()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise ValueError("not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=dtypes[dtype_code], offset=4 + 4 * ndim)
    return arr.reshape(dims)
