"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor

__all__ = ["Adam"]


class Adam:
    """Bias-corrected Adam. ``step`` consumes and zeroes the gradients.

    Defaults (lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8) are the
    optimizer's canonical settings.
    """

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, dict):
            items = list(params.items())
        else:
            items = [(f"param{i}", p) for i, p in enumerate(params)]
        for name, p in items:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ValueError(f"'{name}' is not a trainable Tensor")
        self.params = items
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in items}
        self._v = {name: np.zeros_like(p.data) for name, p in items}

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient; run backward first")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter '{name}' became non-finite after Adam update")
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
