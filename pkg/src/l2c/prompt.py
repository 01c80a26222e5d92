"""Domain prompt generation: aggregate, query the cache, assemble.

A support batch is flattened into one long token row, led by the learnable
domain token, and pushed through the complement network; the token's output
row is the batch's domain summary. That summary queries a learnable
key-value cache of source-domain knowledge, and the scaled value rows plus
the summary itself form the (L+1) x d domain prompt, summary last.

The aggregation path adds no positional information, so the summary is
order-agnostic across support images (up to float addition order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .cpnet import CPNet
from .errors import CacheDroppedError, DimensionError, ValidationError
from .tape import Parameter, Tensor

SUPPORT_DERIVED = "support-derived"


class DomainCache:
    """Learnable L x d key and value banks of source-domain knowledge.

    ``drop()`` severs access permanently: the adaptation runtime discards
    the cache once a prompt is built, and any later touch is a bug.
    """

    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        if size < 1:
            raise ValidationError(f"cache size must be >= 1, got {size}")
        self.size = size
        self.dim = dim
        self._keys = Parameter("cache.keys", rng.normal(0.0, 0.02, (size, dim)))
        self._values = Parameter("cache.values", rng.normal(0.0, 0.02, (size, dim)))
        self._dropped = False

    def _check(self):
        if self._dropped:
            raise CacheDroppedError(
                "domain cache was dropped after prompt computation")

    @property
    def keys(self) -> Parameter:
        self._check()
        return self._keys

    @property
    def values(self) -> Parameter:
        self._check()
        return self._values

    @property
    def dropped(self) -> bool:
        return self._dropped

    def drop(self):
        self._dropped = True
        self._keys = None
        self._values = None

    def parameters(self) -> list:
        self._check()
        return [self._keys, self._values]


class DomainToken:
    """The learnable 1 x d token that leads every aggregation pass."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.token = Parameter("domain.token", rng.normal(0.0, 0.02, (1, dim)))

    def parameters(self) -> list:
        return [self.token]


@dataclass
class DomainPrompt:
    """(L+1) x d prompt; the aggregated domain summary is the last row."""

    matrix: np.ndarray
    source: str = SUPPORT_DERIVED

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise DimensionError("prompt shape", "(L+1, d) with L >= 1",
                                 self.matrix.shape)

    @property
    def summary(self) -> np.ndarray:
        return self.matrix[-1:]


def aggregate_domain_token(cpnet: CPNet, token: DomainToken,
                           patch_tokens) -> Tensor:
    """Summarize a support batch into one domain row.

    ``patch_tokens`` is (b, l, d): embedded patches of b support images,
    no CLS. The rows are flattened to one (b*l, d) sequence, the domain
    token is prepended, the complement stack runs over the whole thing,
    and the output row at the token's position comes back as (1, d).
    """
    if isinstance(patch_tokens, Tensor):
        base = patch_tokens
    else:
        base = Tensor(np.asarray(patch_tokens, dtype=np.float64))
    if base.ndim != 3:
        raise DimensionError("support patch tokens rank", 3, base.ndim)
    b, l, d = base.shape
    if b < 1:
        raise ValidationError("support set is empty")
    if d != token.token.shape[1]:
        raise DimensionError("support token width", token.token.shape[1], d)
    flat = tape.reshape(base, (b * l, d))
    x = tape.concat([token.token, flat], axis=0)
    out = cpnet.forward(x)
    return tape.slice_axis(out, 0, 0, 1)


def query_cache(cache: DomainCache, summary) -> Tensor:
    """Scale each value row by its key's softmax affinity to the summary.

    Weights are softmax(K @ summary^T) over the L cache entries; row i of
    the result is w_i * V_i, so L rows survive into the prompt.
    """
    s = summary if isinstance(summary, Tensor) else Tensor(summary)
    if s.shape != (1, cache.dim):
        raise DimensionError("domain summary shape", (1, cache.dim), s.shape)
    scores = tape.transpose(tape.matmul(cache.keys, tape.transpose(s)))
    weights = tape.transpose(tape.softmax(scores))
    return cache.values * weights


def assemble_prompt(queried, summary):
    """Stack queried value rows over the summary: (L+1) x d, summary last."""
    q_t = queried if isinstance(queried, Tensor) else Tensor(queried)
    s_t = summary if isinstance(summary, Tensor) else Tensor(summary)
    if q_t.shape[-1] != s_t.shape[-1]:
        raise DimensionError("prompt widths", q_t.shape[-1], s_t.shape[-1])
    stacked = tape.concat([q_t, s_t], axis=0)
    if isinstance(queried, Tensor) or isinstance(summary, Tensor):
        return stacked
    return DomainPrompt(matrix=stacked.data, source=SUPPORT_DERIVED)


def build_prompt(cpnet: CPNet, token: DomainToken, cache: DomainCache,
                 patch_tokens) -> Tensor:
    """Full support-to-prompt pipeline on the tape."""
    summary = aggregate_domain_token(cpnet, token, patch_tokens)
    return assemble_prompt(query_cache(cache, summary), summary)
