from __future__ import annotations

import numpy as np

from .tensor import Parameter


class ConfigError(ValueError):
    pass


def adamw_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-4, step: int = 1) -> None:
    """One AdamW update in place (decoupled decay, bias-corrected moments).

    ``grads`` parallels ``params``. ``state`` maps id(param) -> (m, v) and is
    updated. Frozen parameters are skipped.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        m, v = state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state[id(p)] = (m, v)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params: list[Parameter], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict = {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                   self.betas, self.eps, self.weight_decay, self.t)
