"""Small layer library on top of the autodiff tensors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Tracks parameters and submodules by attribute name (insertion order)."""

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self.__dict__.setdefault("_modules", {})[name] = ModuleList(value)
            object.__setattr__(self, name, value)
            return
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.__dict__.get("_params", {}).items():
            yield (prefix + name, p)
        for name, m in self.__dict__.get("_modules", {}).items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag


class ModuleList(Module):
    def __init__(self, mods):
        for i, m in enumerate(mods):
            setattr(self, str(i), m)


def _init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, std: float = 0.02, zero_init: bool = False):
        if zero_init:
            self.w = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        else:
            self.w = _init_normal(rng, (d_in, d_out), std)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        object.__setattr__(self, "eps", eps)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, rng, count: int, dim: int, std: float = 0.02):
        self.table = _init_normal(rng, (count, dim), std)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


class Mlp(Module):
    """Two-layer GELU MLP."""

    def __init__(self, rng, dim: int, hidden: int | None = None, d_out: int | None = None,
                 zero_out: bool = False):
        hidden = hidden or 4 * dim
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, d_out or dim, zero_init=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[n, h*d] -> [h, n, d]"""
    n, c = x.shape
    d = c // heads
    return T.transpose(T.reshape(x, (n, heads, d)), 0, 1)


def merge_heads(x: Tensor) -> Tensor:
    """[h, n, d] -> [n, h*d]"""
    h, n, d = x.shape
    return T.reshape(T.transpose(x, 0, 1), (n, h * d))


class MultiHeadAttention(Module):
    """Attention over flat [tokens, dim] inputs with an optional external KV source."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise T.ShapeError("dim must divide evenly into heads")
        object.__setattr__(self, "heads", heads)
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Per-layer K/V projections of [n, dim] features -> [h, n, d] pair."""
        return split_heads(self.wk(x), self.heads), split_heads(self.wv(x), self.heads)

    def attend(self, x_q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = split_heads(self.wq(x_q), self.heads)
        out = T.attention(q, k, v, mask=mask)
        return self.wo(merge_heads(out))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        k, v = self.project_kv(x)
        return self.attend(x, k, v, mask=mask)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
