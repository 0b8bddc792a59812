"""Central finite-difference gradient checking for the tape engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element of ``x``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    g = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> dict[int, float]:
    """Relative error between tape and finite-difference gradients, per input.

    Every input must have ``requires_grad``.  ``f`` must rebuild the graph from
    the current input values on every call.
    """
    T.zero_grad(inputs)
    T.backward(f())
    out = {}
    for i, x in enumerate(inputs):
        out[i] = relative_error(x.grad.copy(), numerical_grad(f, x, h))
    return out
