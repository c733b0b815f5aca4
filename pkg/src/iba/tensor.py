"""Dense tensors with reverse-mode automatic differentiation.

The arrays underneath are plain numpy arrays. Every operation that touches a
tensor requiring gradients records its parents and a backward rule; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.

Computation runs in float32 unless a float64 default is selected with
:func:`default_dtype`, which the gradient-check tests use.
"""

from __future__ import annotations

import contextlib
import math
import threading
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

LOG_EPS = 1e-12



class _Mode(threading.local):
    # per thread, so worker threads cannot leave grad recording switched off for others
    dtype = np.float32
    grad = True


_state = _Mode()


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def get_default_dtype():
    return _state.dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def grad_enabled() -> bool:
    return _state.grad


class Tensor:
    """An n-dimensional array node in the autodiff graph.

    Args:
        data: anything ``np.asarray`` accepts. Floating data is cast to the
            current default dtype.
        requires_grad: whether ``grad`` should be populated by ``backward``.
        name: optional label, used in error messages and weight archives.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype())
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ---- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ---- differentiation ---------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Without an explicit seed gradient the tensor must hold exactly one
        element.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tape(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root`` in topological order.

    Every node appears after all of its inputs; ``root`` is last.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    dtype = get_default_dtype()
    out.data = data if data.dtype == dtype else data.astype(dtype)
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scalar_mul(a, b)
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scalar_mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with inputs clamped to at least 1e-12."""
    a = as_tensor(a)
    safe = np.maximum(a.data, LOG_EPS)
    gate = a.data >= LOG_EPS
    return _result(np.log(safe), (a,), lambda g: (g * gate / safe,))


def log1p(a) -> Tensor:
    """``log(1 + a)``, accurate for small ``a``; ``1 + a`` is clamped like :func:`log`."""
    a = as_tensor(a)
    safe = np.maximum(a.data, LOG_EPS - 1.0)
    gate = a.data >= LOG_EPS - 1.0
    return _result(np.log1p(safe), (a,), lambda g: (g * gate / (1.0 + safe),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = a.data > 0
    return _result(a.data * gate, (a,), lambda g: (g * gate,))


def guided_relu(a) -> Tensor:
    """ReLU whose backward pass also drops negative upstream gradients."""
    a = as_tensor(a)
    gate = a.data > 0
    return _result(a.data * gate, (a,), lambda g: (g * gate * (g > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    gate = out == a.data
    return _result(out, (a,), lambda g: (g * gate,))


# ---- reductions and shape ---------------------------------------------------


def sum_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scalar_mul(sum_axis(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_batch(a, n: int) -> Tensor:
    """Repeat a ``(1, ...)`` tensor ``n`` times along the batch axis."""
    a = as_tensor(a)
    if a.shape[0] != 1:
        raise ShapeError(f"expected leading dim 1, got {a.shape}")
    return _result(
        np.repeat(a.data, n, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),)
    )


# ---- linear algebra and nn ops ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (N, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError(f"logits {logits.shape} vs {len(targets)} targets")
    lp = log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=get_default_dtype())
    onehot[np.arange(len(targets)), targets] = -1.0 / len(targets)
    return sum_axis(mul(lp, Tensor(onehot)))


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over (N, Cin, H, W) with (Cout, Cin, kh, kw) kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 operands, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d input has {cin} channels but weight expects {wcin}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols[c, i, j, n, y, x] = xp[n, c, y*stride + i, x*stride + j]
    cols = np.empty((cin, kh, kw, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(cin * kh * kw, n * oh * ow)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, oh, ow).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * oh * ow)
        gx = gw = None
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, oh, ow)
            gxp = np.zeros((cin, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, backward)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    The gradient of each window goes to its maximum; ties go to the lowest
    flat index within the window.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    views = [
        x.data[:, :, i : oh * size : size, j : ow * size : size]
        for i in range(size)
        for j in range(size)
    ]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            i, j = divmod(k, size)
            gx[:, :, i : oh * size : size, j : ow * size : size] = g * hit
        return (gx,)

    return _result(out, (x,), backward)


# ---- separable linear resampling: blur and resize ---------------------------


def _apply_separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[..., i, j] = sum_{a,b} rows[i, a] x[..., a, b] cols[j, b]."""
    rows = rows.astype(get_default_dtype(), copy=False)
    cols = cols.astype(get_default_dtype(), copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel1d(sigma)
    radius = len(kernel) // 2
    # index map of np.pad(mode="reflect") applied to arange(n)
    src = np.pad(np.arange(n), radius, mode="reflect")
    mat = np.zeros((n, n))
    for i in range(n):
        np.add.at(mat[i], src[i : i + 2 * radius + 1], kernel)
    mat.setflags(write=False)
    return mat


def gaussian_blur(x, sigma: float) -> Tensor:
    """Separable Gaussian blur over the last two axes with reflect padding.

    The kernel has radius ``ceil(3 * sigma)`` and sums to one. ``sigma == 0``
    returns the input unchanged.
    """
    x = as_tensor(x)
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return x
    h, w = x.shape[-2:]
    return _apply_separable(x, _blur_matrix(h, float(sigma)), _blur_matrix(w, float(sigma)))


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres: source coordinate of output pixel i
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    mat.setflags(write=False)
    return mat


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes using half-pixel centres."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    return _apply_separable(x, _resize_matrix(h, out_h), _resize_matrix(w, out_w))
