"""Transformer building blocks shared by the encoder, CPNet, and fusion.

Pre-normalization throughout: attention and feed-forward each read a
layer-normed copy of their input and add their output back residually.
Blocks accept (S, d) or batched (B, S, d) inputs; all projections are
bias-free, the feed-forward (hidden width 4d) carries biases.
"""

from __future__ import annotations

import math

import numpy as np

from . import tape
from .errors import DimensionError, ValidationError
from .numerics import layer_norm
from .tape import Parameter, Tensor


class LayerNorm:
    """Learnable gain/bias over the last axis."""

    def __init__(self, name: str, dim: int):
        self.gain = Parameter(f"{name}.gain", np.ones(dim))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def parameters(self) -> list:
        return [self.gain, self.bias]


class _Attention:
    """Projected multi-head scaled dot-product attention.

    Projections default to width-scaled init (std 1/sqrt(dim)) so
    attention logits start at unit order instead of flat.
    """

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator,
                 std: float | None = None):
        if heads < 1 or dim % heads:
            raise ValidationError(
                f"head count must divide width {dim}, got {heads}")
        if std is None:
            std = 1.0 / math.sqrt(dim)
        self.dim = dim
        self.heads = heads
        self.wq = Parameter(f"{name}.wq", rng.normal(0.0, std, (dim, dim)))
        self.wk = Parameter(f"{name}.wk", rng.normal(0.0, std, (dim, dim)))
        self.wv = Parameter(f"{name}.wv", rng.normal(0.0, std, (dim, dim)))
        self.wo = Parameter(f"{name}.wo", rng.normal(0.0, std, (dim, dim)))

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        if q_in.shape[-1] != self.dim:
            raise DimensionError("attention input width", self.dim, q_in.shape[-1])
        if kv_in.shape[-1] != self.dim:
            raise DimensionError("attention memory width", self.dim, kv_in.shape[-1])
        q = tape.matmul(q_in, self.wq)
        k = tape.matmul(kv_in, self.wk)
        v = tape.matmul(kv_in, self.wv)
        dh = self.dim // self.heads
        scale = 1.0 / math.sqrt(dh)
        if self.heads == 1:
            mixed = self._attend(q, k, v, scale)
        else:
            parts = []
            for h in range(self.heads):
                lo, hi = h * dh, (h + 1) * dh
                parts.append(self._attend(tape.slice_axis(q, -1, lo, hi),
                                          tape.slice_axis(k, -1, lo, hi),
                                          tape.slice_axis(v, -1, lo, hi), scale))
            mixed = tape.concat(parts, axis=-1)
        return tape.matmul(mixed, self.wo)

    @staticmethod
    def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
        scores = tape.matmul(q, tape.transpose(k)) * scale
        return tape.matmul(tape.softmax(scores), v)

    def parameters(self) -> list:
        return [self.wq, self.wk, self.wv, self.wo]


class _FeedForward:
    """Two-layer GELU MLP, hidden width 4d, fan-in-scaled init."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator,
                 std: float | None = None):
        hidden = 4 * dim
        s1 = std if std is not None else 1.0 / math.sqrt(dim)
        s2 = std if std is not None else 1.0 / math.sqrt(hidden)
        self.w1 = Parameter(f"{name}.w1", rng.normal(0.0, s1, (dim, hidden)))
        self.b1 = Parameter(f"{name}.b1", np.zeros(hidden))
        self.w2 = Parameter(f"{name}.w2", rng.normal(0.0, s2, (hidden, dim)))
        self.b2 = Parameter(f"{name}.b2", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tape.matmul(tape.gelu(tape.matmul(x, self.w1) + self.b1),
                           self.w2) + self.b2

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


class SelfAttentionBlock:
    """Pre-norm self-attention + feed-forward with residuals."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator,
                 std: float | None = None):
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.attn = _Attention(f"{name}.attn", dim, heads, rng, std)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.ffn = _FeedForward(f"{name}.ffn", dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        normed = self.ln1(x)
        x = x + self.attn(normed, normed)
        return x + self.ffn(self.ln2(x))

    def parameters(self) -> list:
        return (self.ln1.parameters() + self.attn.parameters()
                + self.ln2.parameters() + self.ffn.parameters())


class CrossAttentionBlock:
    """Pre-norm cross-attention: queries read a normed external memory."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator,
                 std: float | None = None):
        self.ln_q = LayerNorm(f"{name}.ln_q", dim)
        self.ln_kv = LayerNorm(f"{name}.ln_kv", dim)
        self.attn = _Attention(f"{name}.attn", dim, heads, rng, std)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.ffn = _FeedForward(f"{name}.ffn", dim, rng, std)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        x = q + self.attn(self.ln_q(q), self.ln_kv(kv))
        return x + self.ffn(self.ln2(x))

    def parameters(self) -> list:
        return (self.ln_q.parameters() + self.ln_kv.parameters()
                + self.attn.parameters() + self.ln2.parameters()
                + self.ffn.parameters())
