from __future__ import annotations

import math

import numpy as np

from .layers import AttentionParams, layer_norm, linear_forward, multi_head_attention
from .tensor import Tensor


class Module:
    """Named container of learnable tensors and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._children.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def cast(self, dtype) -> None:
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.param("weight", uniform_init(rng, (n_in, n_out), n_in, gain))
        self.bias = self.param("bias", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)

    @staticmethod
    def count(n_in: int, n_out: int) -> int:
        return n_in * n_out + n_out


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    @staticmethod
    def count(dim: int) -> int:
        return 2 * dim


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.dim, self.heads = dim, heads
        for n in ("q", "k", "v", "o"):
            self.param(f"w{n}", uniform_init(rng, (dim, dim), dim))
            self.param(f"b{n}", np.zeros(dim))

    @property
    def attention_params(self) -> AttentionParams:
        return AttentionParams(**self._params)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
        return multi_head_attention(q, k, v, self.heads, self.attention_params, return_weights)

    @staticmethod
    def count(dim: int) -> int:
        return 4 * (dim * dim + dim)
