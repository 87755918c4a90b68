"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x``.

    ``x.value`` is perturbed in place and restored afterwards.  With
    ``coords`` (flat indices) only those entries are estimated; the rest stay 0.
    """
    grad = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max |a - n| / max(1, |n|)`` elementwise."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
                    samples: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error per named parameter between autograd and central differences.

    ``samples`` limits each parameter to that many random coordinates.
    """
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        analytic = grads.get(p.node_id, np.zeros_like(p.value)).reshape(-1)
        coords = None
        if samples is not None and samples < p.value.size:
            coords = rng.choice(p.value.size, size=samples, replace=False)
        numeric = numerical_gradient(fn, p, h, coords).reshape(-1)
        if coords is not None:
            analytic, numeric = analytic[coords], numeric[coords]
        errors[name] = relative_error(analytic, numeric)
    return errors
