"""Adam optimizer over a list of leaf tensors."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from fbpfusion.errors import ContractError
from fbpfusion.tensor import Tensor


class Adam:
    """Adam with bias correction (Kingma & Ba).  Updates ``param.data`` in place."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grad_scale: float = 1.0) -> None:
        missing = [p.name or repr(p) for p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"adam step: no gradient for {', '.join(missing)}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * grad_scale if grad_scale != 1.0 else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)


def adam_step(params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              state: Adam | None = None) -> Adam:
    """Functional form: one Adam update, creating optimizer state on first use."""
    opt = state if state is not None else Adam(params, lr, beta1, beta2, eps)
    opt.step()
    return opt
