"""Reusable layers: linear, embeddings, attention, feed-forward, transformer blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor owned by a Module."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or T.get_dtype()), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class MLP(Module):
    """``depth`` linear layers with GELU between them; depth 1 is a single affine map."""

    def __init__(self, n_in: int, n_out: int, depth: int, rng: np.random.Generator, hidden: int | None = None):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        hidden = hidden or n_out
        dims = [n_in] + [hidden] * (depth - 1) + [n_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = T.gelu(x)
            x = layer(x)
        return x


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(uniform_init(rng, (n_rows, dim), dim))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


def embed_lookup(table: Tensor, ids) -> Tensor:
    return T.embedding(table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention.

    Serves as self-attention when queries and keys_values are the same tensor
    and as cross-attention otherwise. The most recent attention weights are
    kept in ``last_weights`` (shape ``(..., heads, n_queries, n_keys)``).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeMismatch(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        # a key bias only shifts each score row by a constant: softmax ignores it
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = x.reshape(*lead, n, self.heads, d // self.heads)
        k = len(lead)
        return x.transpose(tuple(range(k)) + (k + 1, k, k + 2))

    def forward(self, queries: Tensor, keys_values: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is True for keys that may be attended; a 1-D mask applies to keys only,
        otherwise it must broadcast to ``(..., n_queries, n_keys)``."""
        q = self._split(self.wq(queries))
        k = self._split(self.wk(keys_values))
        v = self._split(self.wv(keys_values))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim >= 2:
                mask = np.expand_dims(mask, -3)
        out, self.last_weights = T.scaled_dot_product_attention(q, k, v, mask, return_weights=True)
        nd = out.ndim
        out = out.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        *lead, n, h, dh = out.shape
        return self.wo(out.reshape(*lead, n, h * dh))


def attention(block: MultiHeadAttention, queries: Tensor, keys_values: Tensor, mask=None) -> Tensor:
    return block(queries, keys_values, mask)


class FeedForward(Module):
    """d -> 4d -> d with exact GELU."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)), then + ffn(ln(.))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))


def transformer_block_forward(block: TransformerBlock, x: Tensor, mask=None) -> Tensor:
    return block(x, mask)
