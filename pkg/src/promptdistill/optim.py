"""AdamW over a named-parameter registry.

Training loops register leaf tensors under stable names; the optimizer
owns the moment buffers and reports the trainable scalar count, which the
parameter-budget tooling reads back.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError
from .ndtensor import Tensor


class AdamW:
    """Decoupled weight decay Adam (bias-corrected moments)."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not params:
            raise ContractError("AdamW: empty parameter registry")
        for name, p in params.items():
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ContractError(f"AdamW: '{name}' is not a trainable tensor")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def n_trainable(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"AdamW: non-finite gradient for '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
