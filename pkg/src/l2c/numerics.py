"""Dense numeric kernels and the finite-difference gradient checker.

The tape in :mod:`l2c.tape` owns differentiation; this module exposes the
kernel-level contracts (softmax over a chosen axis, scaled dot-product
attention, layer normalization) plus matrix validation helpers and
``grad_check``, the harness every differentiable operation is verified
against.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import tape
from .errors import DimensionError, NonFiniteError, ValidationError
from .tape import Parameter, Tensor


def require_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    """Raise NonFiniteError naming the first bad index if a is not finite."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{what} is not finite at index {tuple(bad)}")
    return a


def as_matrix(data, rows: int | None = None, cols: int | None = None,
              what: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{what} rank", 2, a.ndim)
    if rows is not None and a.shape[0] != rows:
        raise DimensionError(f"{what} rows", rows, a.shape[0])
    if cols is not None and a.shape[1] != cols:
        raise DimensionError(f"{what} cols", cols, a.shape[1])
    require_finite(a, what)
    return a


def softmax(x, axis: str = "rows") -> Tensor:
    """Softmax over the chosen axis of a matrix ("rows": each row sums to 1).

    Stabilized by max-subtraction; accepts Tensor or array input.
    """
    t = x if isinstance(x, Tensor) else Tensor(x)
    if axis == "rows":
        return tape.softmax(t)
    if axis == "cols":
        return tape.transpose(tape.softmax(tape.transpose(t)))
    raise ValidationError(f"softmax axis must be 'rows' or 'cols', got {axis!r}")


def attention(q, k, v, scale: float | None = None) -> Tensor:
    """softmax(scale * Q K^T) V with the softmax taken over keys.

    Q: (..., m, d), K: (..., n, d), V: (..., n, d) -> (..., m, d).
    scale defaults to 1/sqrt(d).
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError("attention query/key width", q.shape[-1], k.shape[-1])
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention key/value count", k.shape[-2], v.shape[-2])
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    if scale <= 0:
        raise ValidationError(f"attention scale must be positive, got {scale}")
    scores = tape.matmul(q, tape.transpose(k)) * scale
    return tape.matmul(tape.softmax(scores), v)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = tape.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tape.tmean(centered * centered, axis=-1, keepdims=True)
    return centered / tape.sqrt(var + eps) * gain + bias


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    sq = tape.tsum(x * x, axis=-1, keepdims=True)
    return x / tape.sqrt(sq + eps)


def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    for p in params:
        p.data -= lr * p.grad


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar loss against central differences.

    ``loss_fn`` must be deterministic and must read the parameters' current
    values. Returns the max over all parameter elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"grad_check eps must be in [1e-7, 1e-3], got {eps}")
    zero_grads(params)
    out = loss_fn()
    if not isinstance(out, Tensor):
        raise ValidationError("loss_fn must return a tape Tensor")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("loss is not finite at the unperturbed point")
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        name = getattr(p, "name", "param")
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            with tape.no_grad():
                p.data[idx] = orig + eps
                lp = loss_fn().item()
                p.data[idx] = orig - eps
                lm = loss_fn().item()
            p.data[idx] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NonFiniteError(
                    f"loss is not finite when perturbing {name}[{idx}]")
            numeric = (lp - lm) / (2.0 * eps)
            a = a_grad[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            if rel > worst:
                worst = rel
    return worst
