"""AdamW with bias-corrected moments and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def hyperparameters(self) -> dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}


def _update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
            state: AdamWState) -> None:
    """One in-place AdamW update of ``p``, ``m`` and ``v``; ``step`` is already incremented."""
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    decay = state.lr * state.weight_decay * p
    p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    p -= decay


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: AdamWState) -> tuple[dict[str, np.ndarray], AdamWState]:
    """Functional AdamW step; inputs are left untouched."""
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same names")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.array(p, dtype=np.float64, copy=True)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = np.array(state.m.get(name, np.zeros_like(p)), copy=True)
        v = np.array(state.v.get(name, np.zeros_like(p)), copy=True)
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"{name}: moment shape mismatch")
        _update(p, g, m, v, step, state)
        new_params[name], new_m[name], new_v[name] = p, m, v
    return new_params, AdamWState(step, new_m, new_v, **state.hyperparameters())


class AdamW:
    """In-place optimizer over named :class:`Tensor` parameters."""

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.state.step += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            _update(p.data, g, self.state.m[name], self.state.v[name], self.state.step, self.state)
