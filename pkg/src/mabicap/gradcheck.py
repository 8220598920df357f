"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing entries from dividing by ~0."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(p.data)
    flat, gflat = p.data.reshape(-1), grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5
                    ) -> dict[str, float]:
    """Max relative error per parameter between backprop and central differences."""
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
    for p in params.values():
        p.grad = None
    return {k: float(relative_error(analytic[k], numeric_grad(loss_fn, p, h)).max()) for k, p in params.items()}
