"""Frozen image encoder: a seed-fixed tokenizer + transformer stand-in.

Construction draws every weight from one seeded generator, so the same
(seed, shape) config reproduces the encoder bit-exactly in any process.
Nothing here ever trains: forwards run with the gradient tape disabled
and all weight arrays are marked read-only after construction.

The patch projection doubles as the input embedding for the complement
network, so both branches consume identical tokens: the frozen stack adds
its positional table internally, while ``input_tokens`` hands out the
position-free [CLS; patches] rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .blocks import SelfAttentionBlock
from .errors import DimensionError
from .tape import Tensor


@dataclass
class SyntheticImage:
    """One desk-scale image: l raw patch rows of width f."""

    grid: np.ndarray
    domain_id: int = 0
    class_id: int | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise DimensionError("image grid rank", 2, self.grid.ndim)


@dataclass
class TokenSequence:
    """A stack of d-wide tokens, optionally led by a CLS row."""

    tokens: np.ndarray
    has_cls: bool

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise DimensionError("token rank", 2, self.tokens.ndim)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class FrozenEncoder:
    """Deterministic frozen feature extractor over synthetic patch grids."""

    def __init__(self, seed: int, num_patches: int, patch_width: int, dim: int,
                 depth: int = 2, heads: int = 1):
        self.seed = seed
        self.num_patches = num_patches
        self.patch_width = patch_width
        self.dim = dim
        self.depth = depth
        rng = np.random.default_rng(seed)
        self.patch_matrix = rng.normal(0.0, 1.0 / np.sqrt(patch_width),
                                       (patch_width, dim))
        self.cls_token = rng.normal(0.0, 1.0, (1, dim))
        self.positions = rng.normal(0.0, 0.5, (num_patches + 1, dim))
        # Stronger-than-trainable init so the frozen stack actually mixes
        # tokens; it stands in for a pretrained backbone, not a fresh one.
        self.blocks = [
            SelfAttentionBlock(f"frozen.block{i}", dim, heads, rng, std=0.3)
            for i in range(depth)
        ]
        self._freeze()

    def _freeze(self):
        self.patch_matrix.flags.writeable = False
        self.cls_token.flags.writeable = False
        self.positions.flags.writeable = False
        for block in self.blocks:
            for p in block.parameters():
                p.data.flags.writeable = False

    def _check_grid(self, grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(grid, dtype=np.float64)
        expected = (self.num_patches, self.patch_width)
        if grid.shape[-2:] != expected:
            raise DimensionError("patch grid shape", expected, grid.shape[-2:])
        return grid

    # -- batched cores (grids: (B, l, f)) --

    def patch_tokens(self, grids: np.ndarray) -> np.ndarray:
        """Project raw patches to (…, l, d) tokens. No CLS, no positions."""
        return self._check_grid(grids) @ self.patch_matrix

    def input_tokens(self, grids: np.ndarray) -> np.ndarray:
        """[CLS; patch tokens]: the shared (…, l+1, d) transformer input."""
        patches = self.patch_tokens(grids)
        cls = np.broadcast_to(self.cls_token, patches.shape[:-2] + (1, self.dim))
        return np.concatenate([cls, patches], axis=-2)

    def encode_batch(self, grids: np.ndarray) -> np.ndarray:
        """Frozen features for a stack of grids: (B, l+1, d)."""
        x = self.input_tokens(grids) + self.positions
        with tape.no_grad():
            t = Tensor(x)
            for block in self.blocks:
                t = block(t)
        return t.data

    # -- single-image interface --

    def embed_patches(self, img: SyntheticImage) -> TokenSequence:
        return TokenSequence(tokens=self.patch_tokens(img.grid), has_cls=False)

    def encode(self, img: SyntheticImage) -> TokenSequence:
        out = self.encode_batch(img.grid[None, :, :])[0]
        return TokenSequence(tokens=out, has_cls=True)
