"""Parameter containers and the layers shared by backbone and heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Weights are drawn from U(-a, a) with a = INIT_GAIN / sqrt(fan_in); biases start at 0.
INIT_GAIN = float(np.sqrt(6.0))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = INIT_GAIN / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


class Module:
    """Walks instance attributes to collect parameters, torch-style."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = T.parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = T.parameter(np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, pad: int):
        self.kernel = T.parameter(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = T.parameter(np.zeros(c_out))
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, stride=1, pad=self.pad, bias=self.bias)
