"""Minimal reverse-mode autodiff over numpy arrays.

Everything trainable in this package flows through the :class:`Tensor` graph
defined here. Design constraints:

* float64 everywhere on the training path (finite differences need headroom);
* ops work on arrays of any rank, batching over leading axes, so an episode
  is a few hundred tape nodes instead of tens of thousands;
* gradients accumulate into ``.grad`` buffers, leaves are :class:`Parameter`
  objects owned by the model, and a ``no_grad`` context builds no graph at all.

Backward closures receive no arguments; they read ``out.grad`` and add into
their parents' ``.grad``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, NonFiniteError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the reverse-mode tape wrapping one float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        arr = np.asarray(self.data)
        if arr.size != 1:
            raise DimensionError("scalar tensor", 1, arr.size)
        return float(arr.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise DimensionError("backward root must be scalar", (1,), self.data.shape)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd()

    # Arithmetic sugar; floats and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor; the unit of checkpointing and SGD updates.

    Invariant: ``grad`` always exists and has the value's shape, zeroed at the
    start of each training step.
    """

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, bwd_builder) -> Tensor:
    """Create an op output; records the closure only when grads can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd_builder(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return run

    return _result(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))

        return run

    return _result(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return run

    return _result(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return run

    return _result(a.data / b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D",
                             ">=2 dims", (a.data.shape, b.data.shape))
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError("matmul inner dimensions",
                             a.data.shape[-1], b.data.shape[-2])

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))

        return run

    return _result(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bwd(out):
        def run():
            a._accumulate(np.swapaxes(out.grad, -1, -2))

        return run

    return _result(np.swapaxes(a.data, -1, -2), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(out):
        def run():
            a._accumulate(out.grad.reshape(a.data.shape))

        return run

    return _result(a.data.reshape(shape), (a,), bwd)


def concat(parts: list, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        def run():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    p._accumulate(g[tuple(sl)])

        return run

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is removed)."""

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = index
            g[tuple(sl)] = out.grad
            a._accumulate(g)

        return run

    return _result(np.take(a.data, index, axis=axis), (a,), bwd)


def slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Select the half-open range [lo, hi) along ``axis``."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(lo, hi)
    sl = tuple(sl)

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            g[sl] = out.grad
            a._accumulate(g)

        return run

    return _result(a.data[sl], (a,), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick row ``idx[i]`` from batch element i: (B, R, d) x (B,) -> (B, d)."""
    idx = np.asarray(idx)
    if a.ndim != 3 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise DimensionError("gather_rows expects (B,R,d) and (B,) indices",
                             (a.data.shape[0],), idx.shape)
    ar = np.arange(a.data.shape[0])

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            np.add.at(g, (ar, idx), out.grad)
            a._accumulate(g)

        return run

    return _result(a.data[ar, idx], (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

        return run

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape) / count)

        return run

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    def bwd(out):
        def run():
            a._accumulate(out.grad * exponent * a.data ** (exponent - 1.0))

        return run

    return _result(a.data ** exponent, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bwd(out):
        def run():
            a._accumulate(out.grad * 0.5 / np.sqrt(a.data))

        return run

    return _result(y, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(out):
        def run():
            a._accumulate(out.grad * out.data)

        return run

    return _result(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(out):
        def run():
            a._accumulate(out.grad / a.data)

        return run

    return _result(np.log(a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(out):
        def run():
            a._accumulate(out.grad * (1.0 - out.data * out.data))

        return run

    return _result(y, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row softmax along the last axis, stabilized by max-subtraction.

    Raises NonFiniteError naming the first offending index if the input
    contains NaN/Inf.
    """
    x = a.data
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"softmax input is not finite at index {tuple(bad)}")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(out):
        def run():
            g = out.grad
            s = out.data
            a._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

        return run

    return _result(y, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth, so finite differences stay honest."""
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bwd(out):
        def run():
            dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x ** 2)
            a._accumulate(out.grad * (0.5 * (1.0 + t) + 0.5 * x * dt))

        return run

    return _result(y, (a,), bwd)
