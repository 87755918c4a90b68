"""Adam optimizer and elementwise gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


def clip_gradients(grads: Mapping[str, np.ndarray], lo: float = -0.1, hi: float = 0.1) -> dict[str, np.ndarray]:
    """Clamp every gradient component into ``[lo, hi]``."""
    if not lo < hi:
        raise ContractError(f"clip range needs lo < hi, got [{lo}, {hi}]")
    return {k: np.clip(g, lo, hi) for k, g in grads.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters missing from ``grads`` are treated as having a zero gradient;
    with fresh moments that leaves them exactly unchanged.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        elif g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} for parameter {name!r} of shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin stateful wrapper pairing a parameter dict with an :class:`AdamState`."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)
