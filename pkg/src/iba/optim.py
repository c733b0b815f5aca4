"""Adam optimizer over :class:`~iba.tensor.Tensor` parameters."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam (Kingma & Ba) with bias correction.

    Parameters are updated in place through their ``data`` arrays; ``grad``
    must have been populated by a preceding ``backward`` call.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
