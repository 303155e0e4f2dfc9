"""Patch transformer image encoder followed by a Q-Former.

The image embedding is ``qformer(vit(image))`` mean-pooled over the learned
query outputs, giving one vector of size ``d_model`` per image.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import MaskError, ShapeMismatch
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, FeedForward, Parameter, TransformerBlock, uniform_init
from .tensor import Tensor


class VitEncoder(Module):
    def __init__(self, channels: int, image_size: int, patch_size: int, dim: int, depth: int, heads: int,
                 rng: np.random.Generator):
        if image_size % patch_size:
            raise ShapeMismatch(f"image size {image_size} not divisible by patch size {patch_size}")
        self.channels = channels
        self.patch_size = patch_size
        self.n_tokens = (image_size // patch_size) ** 2
        self.patch_proj = Linear(channels * patch_size * patch_size, dim, rng)
        self.pos = Parameter(uniform_init(rng, (self.n_tokens, dim), dim))
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]

    def patchify(self, images: Tensor) -> Tensor:
        """(..., C, H, W) -> (..., T, C*P*P) with patches in row-major grid order."""
        *lead, c, h, w = images.shape
        p = self.patch_size
        if c != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got {c}")
        if h % p or w % p:
            raise ShapeMismatch(f"image {h}x{w} not divisible by patch size {p}")
        k = len(lead)
        x = images.reshape(*lead, c, h // p, p, w // p, p)
        x = x.transpose(tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4))
        return x.reshape(*lead, (h // p) * (w // p), c * p * p)

    def patch_embed(self, images: Tensor) -> Tensor:
        patches = self.patchify(T.as_tensor(images))
        if patches.shape[-2] != self.n_tokens:
            raise ShapeMismatch(
                f"image yields {patches.shape[-2]} patches; encoder was built for {self.n_tokens}"
            )
        return self.patch_proj(patches) + self.pos

    def forward(self, images: Tensor) -> Tensor:
        x = self.patch_embed(images)
        for block in self.blocks:
            x = block(x)
        return x


class QFormerBlock(Module):
    """Query self-attention, cross-attention to patch features, feed-forward (all pre-norm)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln_cross = LayerNorm(dim)
        self.ln_memory = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        h = self.ln_self(queries)
        queries = queries + self.self_attn(h, h)
        queries = queries + self.cross_attn(self.ln_cross(queries), self.ln_memory(memory))
        return queries + self.ffn(self.ln_ffn(queries))


class QFormer(Module):
    def __init__(self, n_queries: int, dim: int, depth: int, heads: int, rng: np.random.Generator):
        self.queries = Parameter(uniform_init(rng, (n_queries, dim), dim))
        self.blocks = [QFormerBlock(dim, heads, rng) for _ in range(depth)]

    def forward(self, patch_feats: Tensor) -> Tensor:
        """(..., T, d) -> (..., Q, d)."""
        if patch_feats.shape[-2] == 0:
            raise MaskError("Q-Former needs at least one patch token")
        lead = patch_feats.shape[:-2]
        x = T.broadcast_to(self.queries, (*lead, *self.queries.shape)) if lead else self.queries
        for block in self.blocks:
            x = block(x, patch_feats)
        return x


def patch_embed(enc: VitEncoder, img) -> Tensor:
    return enc.patch_embed(img)


def vit_encode(enc: VitEncoder, img) -> Tensor:
    return enc(T.as_tensor(img))


def qformer_encode(qf: QFormer, patch_feats: Tensor) -> Tensor:
    return qf(patch_feats)


def encode_image(enc: VitEncoder, qf: QFormer, img) -> Tensor:
    """One embedding per image: mean over the Q-Former's query outputs."""
    return qf(enc(T.as_tensor(img))).mean(axis=-2)
