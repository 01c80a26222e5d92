"""The trainable complement network and its revert-attention gate.

The complement network is a plain transformer stack running parallel to
the frozen encoder. Revert attention turns its output into a residual
correction: ordinary attention weights between complement and frozen
tokens are flipped (1 - softmax), so the correction concentrates on what
the frozen features under-attend, then gets added back on top of them.

Functions accept tape Tensors (differentiable) or plain arrays; gradients
reach the block weights only through the complement branch, never through
the frozen features.
"""

from __future__ import annotations

import math

import numpy as np

from . import tape
from .blocks import SelfAttentionBlock
from .encoder import TokenSequence
from .errors import DimensionError
from .tape import Tensor


class CPNet:
    """Transformer stack matching the frozen encoder's width."""

    def __init__(self, dim: int, depth: int, heads: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.depth = depth
        self.blocks = [
            SelfAttentionBlock(f"cpnet.block{i}", dim, heads, rng)
            for i in range(depth)
        ]

    def forward(self, x: Tensor) -> Tensor:
        """Differentiable stack application; identity when depth is 0."""
        if x.shape[-1] != self.dim:
            raise DimensionError("complement input width", self.dim, x.shape[-1])
        for block in self.blocks:
            x = block(x)
        return x

    def cp_forward(self, tokens: TokenSequence) -> TokenSequence:
        """TokenSequence convenience wrapper (no gradient graph)."""
        with tape.no_grad():
            out = self.forward(Tensor(tokens.tokens))
        return TokenSequence(tokens=out.data, has_cls=tokens.has_cls)

    def parameters(self) -> list:
        return [p for block in self.blocks for p in block.parameters()]


def _as_pair(cp_out, frozen_out):
    tensor_mode = isinstance(cp_out, Tensor) or isinstance(frozen_out, Tensor)
    cp = cp_out if isinstance(cp_out, Tensor) else Tensor(cp_out)
    fr = frozen_out if isinstance(frozen_out, Tensor) else Tensor(frozen_out)
    if cp.shape != fr.shape:
        raise DimensionError("revert-attention shapes", cp.shape, fr.shape)
    return cp, fr, tensor_mode


def revert_attention(cp_out, frozen_out):
    """Parameter-free complement gate.

    A = 1 - softmax(cp_out @ frozen_out^T / sqrt(d)) with the softmax over
    the frozen (key) tokens; returns (A, A @ cp_out). Every A entry lies in
    [0, 1] and each row sums to (token count - 1); a single-token input
    forces A = 0 so the correction vanishes.
    """
    cp, fr, tensor_mode = _as_pair(cp_out, frozen_out)
    scale = 1.0 / math.sqrt(cp.shape[-1])
    if tensor_mode:
        scores = tape.matmul(cp, tape.transpose(fr)) * scale
        attn = 1.0 - tape.softmax(scores)
        return attn, tape.matmul(attn, cp)
    with tape.no_grad():
        scores = tape.matmul(cp, tape.transpose(fr)) * scale
        attn = 1.0 - tape.softmax(scores)
        out = tape.matmul(attn, cp)
    return attn.data, out.data


def complement(frozen_out, cp_rt):
    """Add the revert-attended correction back onto the frozen features."""
    frozen_is_seq = isinstance(frozen_out, TokenSequence)
    fr = frozen_out.tokens if frozen_is_seq else frozen_out
    ct = cp_rt.tokens if isinstance(cp_rt, TokenSequence) else cp_rt
    tensor_mode = isinstance(fr, Tensor) or isinstance(ct, Tensor)
    fr_t = fr if isinstance(fr, Tensor) else Tensor(fr)
    ct_t = ct if isinstance(ct, Tensor) else Tensor(ct)
    if fr_t.shape != ct_t.shape:
        raise DimensionError("complement shapes", fr_t.shape, ct_t.shape)
    if tensor_mode:
        return fr_t + ct_t
    out = fr_t.data + ct_t.data
    if frozen_is_seq:
        return TokenSequence(tokens=out, has_cls=frozen_out.has_cls)
    return out
