"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, Tensor


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    ``params`` maps names to leaf tensors; moment buffers are keyed by name
    and persist across ``step`` calls. ``lr`` may be reassigned between steps
    for schedules. Names in ``no_decay`` skip the weight-decay term.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay=()):
        self.params = params
        self.no_decay = frozenset(no_decay)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(
                p.data.dtype, copy=False
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adamw_step(opt: AdamW, lr: float | None = None) -> None:
    """One update, optionally overriding the learning rate first."""
    if lr is not None:
        opt.lr = lr
    opt.step()
