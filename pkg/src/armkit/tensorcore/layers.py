"""Layers for the temporal reward model and the policy network."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, ShapeError
from . import tensor as T
from .tensor import Tensor


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Lightweight container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{key}.{i}."))
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"param {name}: shape {arr.shape} != "
                                 f"{p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Tensor(init_uniform(rng, (d_in, d_out), d_in),
                             requires_grad=True)
        self.bias = (Tensor(init_uniform(rng, (d_out,), d_in),
                            requires_grad=True) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        single = x.data.ndim == 1
        if single:
            x = T.reshape(x, (1, x.shape[0]))
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return T.reshape(out, (out.shape[-1],)) if single else out


class MLP(Module):
    """Feed-forward stack with GELU between the linear maps."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ConfigurationError("MLP needs at least input and output dims")
        self.layers = [Linear(dims[i], dims[i + 1], rng)
                       for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}gamma": self.gamma, f"{prefix}beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(init_uniform(rng, (vocab, dim), dim),
                            requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class CausalSelfAttention(Module):
    """Masked scaled-dot-product attention over (batch, time, width)."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads != 0:
            raise ConfigurationError("width must be divisible by heads")
        self.heads = heads
        self.head_dim = width // heads
        # no q/k/v biases: a key bias shifts whole softmax rows, which has
        # exactly zero effect (and zero gradient)
        self.wq = Linear(width, width, rng, bias=False)
        self.wk = Linear(width, width, rng, bias=False)
        self.wv = Linear(width, width, rng, bias=False)
        self.wo = Linear(width, width, rng)

    def _split(self, x: Tensor, batch: int, time: int) -> Tensor:
        x = T.reshape(x, (batch, time, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        batch, time, width = x.shape
        q = self._split(self.wq(x), batch, time)
        k = self._split(self.wk(x), batch, time)
        v = self._split(self.wv(x), batch, time)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                         1.0 / math.sqrt(self.head_dim))
        weights = T.softmax(scores, mask=causal_mask(time))
        out = T.matmul(weights, v)
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (batch, time, width))
        return self.wo(out)


class EncoderBlock(Module):
    """Pre-norm transformer block: attention + feed-forward, residual."""

    def __init__(self, width: int, heads: int, ff_dim: int,
                 rng: np.random.Generator):
        self.ln1 = LayerNorm(width)
        self.attn = CausalSelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.ff1 = Linear(width, ff_dim, rng)
        self.ff2 = Linear(ff_dim, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.ff2(T.gelu(self.ff1(self.ln2(x)))))
