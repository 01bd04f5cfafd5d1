"""Parameter containers and small building blocks."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Walks attributes to collect parameters under dotted canonical paths."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return ag.parameter(rng.uniform(-bound, bound, shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in) if bias else None

    def __call__(self, x) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Two affine maps with a rectifier between them."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x) -> Tensor:
        return self.fc2(ag.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ag.parameter(np.ones(d))
        self.bias = ag.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)
