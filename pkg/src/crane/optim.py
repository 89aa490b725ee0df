"""AdamW with decoupled weight decay.

The decay term is *not* scaled by the learning rate, following the original
decoupled formulation with a unit schedule multiplier::

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - weight_decay * p

so ``lr = 0`` leaves a pure weight-decay map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamWState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64))


def adamw_step(param, grad, state: AdamWState, lr=5e-4, betas=(0.9, 0.999),
               eps=1e-8, weight_decay=0.0):
    """Return the updated parameter array; ``state`` is advanced in place."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps) - weight_decay * param


@dataclass
class AdamW:
    """Optimizer over a list of leaf tensors; updates ``tensor.data`` in place.

    ``lr_scales`` multiplies the learning rate per parameter (scalar or an
    array broadcastable to the parameter).
    """

    params: list
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_scales: list | None = None
    states: list = field(init=False)

    def __post_init__(self):
        self.states = [AdamWState.zeros_like(p.data) for p in self.params]
        if self.lr_scales is None:
            self.lr_scales = [1.0] * len(self.params)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("one learning-rate scale per parameter")

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, state, scale in zip(self.params, self.states, self.lr_scales):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = adamw_step(p.data, grad, state, self.lr * np.asarray(scale), self.betas,
                                self.eps, self.weight_decay)
