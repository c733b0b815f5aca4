"""Desk-scale CNN classifier with named tap points.

The default architecture has four conv blocks (conv + ReLU), 2x2 max pooling
after blocks 2 and 4, and a dense layer to the class logits. A tap named
``convN`` refers to the output of block N, i.e. after its ReLU. That is where
a bottleneck can be spliced in or features read out.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MAGIC = b"IBAW"
ARCHIVE_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | relu | maxpool | flatten | dense
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    @property
    def conv_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "conv"]

    @property
    def param_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind in ("conv", "dense")]

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "classes": self.classes,
                "layers": [dataclasses.asdict(l) for l in self.layers],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        return cls(tuple(d["input_shape"]), d["classes"], tuple(LayerSpec(**l) for l in d["layers"]))


@dataclass(frozen=True)
class TapPoint:
    name: str
    shape: tuple[int, int, int]

    @property
    def k(self) -> int:
        """Number of feature elements c*h*w."""
        return int(np.prod(self.shape))


def default_spec(
    classes: int,
    input_shape=(1, 64, 64),
    channels: Sequence[int] = (8, 8, 16, 16),
    downsample: str = "maxpool",
) -> ModelSpec:
    """Four conv blocks and a dense head.

    ``downsample="stride"`` replaces each max-pool with a stride-2 convolution
    in the preceding block; spatial shapes at every tap stay the same.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if downsample not in ("maxpool", "stride"):
        raise ValueError(f"downsample must be 'maxpool' or 'stride', got {downsample!r}")
    c, h, w = input_shape
    layers = []
    prev = c
    for i, ch in enumerate(channels, 1):
        shrink = i in (2, 4)
        stride = 2 if shrink and downsample == "stride" else 1
        layers.append(LayerSpec(f"conv{i}", "conv", prev, ch, 3, stride, 1))
        layers.append(LayerSpec(f"relu{i}", "relu"))
        if shrink and downsample == "maxpool":
            layers.append(LayerSpec(f"pool{i}", "maxpool", kernel=2))
        if shrink:
            h, w = h // 2, w // 2
        prev = ch
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("fc", "dense", prev * h * w, classes))
    return ModelSpec(tuple(input_shape), classes, tuple(layers))


def _init_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if spec.kind == "conv":
        shape = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        fan_in = spec.in_ch * spec.kernel * spec.kernel
    else:
        shape = (spec.out_ch, spec.in_ch)
        fan_in = spec.in_ch
    bound = math.sqrt(6.0 / fan_in)
    return {
        "weight": rng.uniform(-bound, bound, shape).astype(np.float32),
        "bias": np.zeros(spec.out_ch, np.float32),
    }


class Model:
    """A sequential network: a :class:`ModelSpec` plus its parameters.

    ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to float32
    arrays. Forward passes never mutate the model.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self._tensors: dict[str, Tensor] = {}
        self._tap_shapes: dict[str, tuple[int, int, int]] = {}

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        for layer in spec.layers:
            if layer.kind in ("conv", "dense"):
                for key, arr in _init_params(layer, rng).items():
                    params[f"{layer.name}.{key}"] = arr
        return cls(spec, params)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    # ---- parameters ---------------------------------------------------------

    def parameters(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Tensors wrapping the parameter arrays (shared memory)."""
        self._tensors = {
            k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()
        }
        for k, t in self._tensors.items():
            # keep one buffer so optimizer updates land in self.params
            self.params[k] = t.data
        return self._tensors

    def _param(self, key: str) -> Tensor:
        t = self._tensors.get(key)
        if t is None or t.data is not self.params[key]:
            t = Tensor(self.params[key], name=key)
            self._tensors[key] = t
        return t

    # ---- forward ------------------------------------------------------------

    @property
    def tap_names(self) -> list[str]:
        return self.spec.conv_names

    def _tap_index(self, tap: str) -> int:
        """Index of the layer whose output is the tap's feature map."""
        names = [l.name for l in self.spec.layers]
        if tap not in self.tap_names:
            raise KeyError(f"unknown tap {tap!r}; choose from {self.tap_names}")
        i = names.index(tap)
        # block output = after the conv's ReLU
        if i + 1 < len(names) and self.spec.layers[i + 1].kind == "relu":
            i += 1
        return i

    def tap(self, name: str) -> TapPoint:
        if name not in self._tap_shapes:
            c, h, w = self.spec.input_shape
            with no_grad():
                out = self.run(Tensor(np.zeros((1, c, h, w), np.float32)), stop=self._tap_index(name) + 1)
            self._tap_shapes[name] = tuple(out.shape[1:])
        return TapPoint(name, self._tap_shapes[name])

    def _apply(self, layer: LayerSpec, x: Tensor, relu: Callable) -> Tensor:
        if layer.kind == "conv":
            return T.conv2d(
                x, self._param(f"{layer.name}.weight"), self._param(f"{layer.name}.bias"),
                stride=layer.stride, pad=layer.pad,
            )
        if layer.kind == "relu":
            return relu(x)
        if layer.kind == "maxpool":
            return T.maxpool2d(x, layer.kernel)
        if layer.kind == "flatten":
            return T.reshape(x, (x.shape[0], -1))
        if layer.kind == "dense":
            return T.dense(x, self._param(f"{layer.name}.weight"), self._param(f"{layer.name}.bias"))
        raise ValueError(f"unknown layer kind {layer.kind!r}")

    def run(
        self,
        x: Tensor,
        start: int = 0,
        stop: int | None = None,
        hooks: dict[int, Callable[[Tensor], Tensor]] | None = None,
        relu: Callable = T.relu,
    ) -> Tensor:
        """Apply layers ``start:stop``; ``hooks[i]`` rewrites the output of layer i."""
        layers = self.spec.layers
        stop = len(layers) if stop is None else stop
        for i in range(start, stop):
            x = self._apply(layers[i], x, relu)
            if hooks and i in hooks:
                x = hooks[i](x)
        return x

    def __call__(self, x, relu: Callable = T.relu) -> Tensor:
        return self.run(T.as_tensor(x), relu=relu)

    def forward_from(self, tap: str, z: Tensor, relu: Callable = T.relu) -> Tensor:
        """Logits computed from a feature map placed at ``tap``."""
        return self.run(z, start=self._tap_index(tap) + 1, relu=relu)

    def features(self, x, taps: Sequence[str]) -> tuple[Tensor, dict[str, Tensor]]:
        """Logits plus the feature maps at each requested tap (one pass)."""
        collected = {}
        index = {self._tap_index(t): t for t in taps}

        def grab(name):
            def hook(r):
                collected[name] = r
                return r
            return hook

        logits = self.run(T.as_tensor(x), hooks={i: grab(n) for i, n in index.items()})
        return logits, collected

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(T.softmax(self(x[i : i + batch_size]), axis=1).data)
        return np.concatenate(out) if out else np.zeros((0, self.spec.classes), np.float32)

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(x[i : i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.spec.classes), np.float32)


def build_default_model(classes: int, seed: int = 0, **kwargs) -> Model:
    return Model.initialize(default_spec(classes, **kwargs), seed)


def forward_with_tap(model: Model, x, tap: str | TapPoint, splice: Callable[[Tensor], Tensor] | None = None):
    """Run ``model`` on ``x`` returning (logits, feature map at ``tap``).

    ``splice`` replaces the feature map for the rest of the forward pass and
    must keep its shape. The returned feature map is the un-spliced one.
    """
    tap = tap.name if isinstance(tap, TapPoint) else tap
    seen = {}

    def hook(r):
        seen["r"] = r
        if splice is None:
            return r
        z = splice(r)
        if tuple(z.shape) != tuple(r.shape):
            raise T.ShapeError(f"splice changed tap shape {r.shape} -> {z.shape}")
        return z

    logits = model.run(T.as_tensor(x), hooks={model._tap_index(tap): hook})
    return logits, seen["r"]


def randomize_from(model: Model, layer_name: str, seed: int) -> Model:
    """Copy of ``model`` with ``layer_name`` and every later layer re-initialised."""
    names = model.spec.param_names
    if layer_name not in names:
        raise KeyError(f"unknown layer {layer_name!r}; choose from {names}")
    out = model.copy()
    # separate stream from Model.initialize so equal seeds never reproduce the original weights
    rng = np.random.default_rng([seed, 1])
    by_name = {l.name: l for l in model.spec.layers}
    for name in names[names.index(layer_name):]:
        for key, arr in _init_params(by_name[name], rng).items():
            out.params[f"{name}.{key}"] = arr
    return out


def cascade_order(model: Model) -> list[str]:
    """Parameter layers from the output backwards, as used by the sanity check."""
    return list(reversed(model.spec.param_names))


# ---- training ----------------------------------------------------------------


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float((model.logits(x).argmax(axis=1) == y).mean())


def train(
    model: Model,
    dataset,
    epochs: int = 10,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Model, list[dict]]:
    """Adam training of a copy of ``model``; returns it with a per-epoch log."""
    if len(dataset.x_train) == 0:
        raise ValueError("dataset has no training images")
    model = model.copy()
    params = model.parameters(requires_grad=True)
    opt = Adam(params.values(), lr=lr)
    rng = np.random.default_rng(seed)
    x, y = dataset.x_train, dataset.y_train
    log = [{"epoch": 0, "loss": float("nan"), "val_acc": accuracy(model, dataset.x_val, dataset.y_val)}]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = T.cross_entropy(model(x[idx]), y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {start // batch_size}")
            loss.backward()
            opt.step()
            total += value * len(idx)
        entry = {
            "epoch": epoch,
            "loss": total / len(x),
            "val_acc": accuracy(model, dataset.x_val, dataset.y_val),
        }
        logger.info("epoch %d loss %.4f val_acc %.4f", epoch, entry["loss"], entry["val_acc"])
        log.append(entry)
        if on_epoch:
            on_epoch(entry)
    model.parameters(requires_grad=False)
    return model, log


# ---- weight archive ------------------------------------------------------------


def write_archive(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays in the IBAW container format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ARCHIVE_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_archive(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    return out


def save_model(model: Model, path) -> None:
    """Weights to ``path`` and the architecture to ``path + '.json'``."""
    write_archive(path, model.params)
    Path(str(path) + ".json").write_text(model.spec.to_json())


def load_model(path, spec: ModelSpec | None = None) -> Model:
    if spec is None:
        spec = ModelSpec.from_json(Path(str(path) + ".json").read_text())
    params = read_archive(path)
    expected = {f"{n}.{k}" for n in spec.param_names for k in ("weight", "bias")}
    if set(params) != expected:
        raise ValueError(f"archive tensors {sorted(params)} do not match the model {sorted(expected)}")
    return Model(spec, params)
