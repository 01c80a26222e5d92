"""The autodiff tape: every op's gradient against finite differences."""

import numpy as np
import pytest

from l2c import tape
from l2c.numerics import grad_check
from l2c.tape import Parameter, Tensor


def check(build, *shapes, seed=0, eps=1e-6):
    """grad_check a scalar-valued graph over fresh random parameters."""
    rng = np.random.default_rng(seed)
    params = [Parameter(f"p{i}", rng.normal(0.0, 1.0, s))
              for i, s in enumerate(shapes)]
    return grad_check(lambda: build(*params), params, eps=eps)


def test_add_mul_sub_div():
    err = check(lambda a, b: tape.tsum(a * b + a - b / (b * b + 3.0)),
                (3, 4), (3, 4))
    assert err < 1e-7


def test_broadcasting_backward():
    # (3,4) + (4,) and (3,1) * (1,4) both hit the unbroadcast path.
    err = check(lambda a, b, c: tape.tsum((a + b) * c), (3, 4), (4,), (3, 1))
    assert err < 1e-7


def test_matmul_transpose_reshape():
    def build(a, b):
        y = tape.matmul(a, tape.transpose(b))
        return tape.tsum(tape.reshape(y, (6,)) ** 2)
    assert check(build, (2, 3), (3, 3)) < 1e-6


def test_batched_matmul():
    def build(a, b):
        return tape.tsum(tape.matmul(a, b) ** 2)
    assert check(build, (4, 2, 3), (4, 3, 2)) < 1e-6


def test_batched_matmul_broadcast_lhs():
    # (B, n, d) @ (d, m) exercises broadcast in the stacked dimension.
    def build(a, b):
        return tape.tsum(tape.matmul(a, b))
    assert check(build, (4, 2, 3), (3, 5)) < 1e-7


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).normal(0, 100, (5, 7)))
    s = tape.softmax(x)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_extreme_magnitudes():
    x = Tensor(np.array([[1e4, -1e4, 0.0]]))
    s = tape.softmax(x).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(), 1.0, atol=1e-6)


def test_softmax_gradient():
    def build(a):
        return tape.tsum(tape.softmax(a) * tape.softmax(a))
    assert check(build, (3, 5)) < 1e-6


def test_log_exp_sqrt_power_tanh_gelu():
    def build(a):
        pos = a * a + 1.0
        y = tape.log(pos) + tape.exp(a * 0.1) + tape.sqrt(pos)
        y = y + tape.tanh(a) + tape.gelu(a) + pos ** 1.5
        return tape.tsum(y)
    assert check(build, (4, 3)) < 1e-6


def test_mean_and_axis_sum():
    def build(a):
        return tape.tsum(tape.tmean(a, axis=-1) ** 2) + tape.tmean(a)
    assert check(build, (3, 5)) < 1e-7


def test_concat_gradient():
    def build(a, b):
        y = tape.concat([a, b], axis=0)
        return tape.tsum(y * y)
    assert check(build, (2, 3), (4, 3)) < 1e-7


def test_concat_last_axis():
    def build(a, b):
        return tape.tsum(tape.concat([a, b], axis=-1) ** 2)
    assert check(build, (2, 3), (2, 2)) < 1e-7


def test_take_row():
    def build(a):
        return tape.tsum(tape.take(a, 1, axis=0) ** 2)
    assert check(build, (4, 3)) < 1e-7


def test_slice_axis():
    def build(a):
        left = tape.slice_axis(a, -1, 0, 2)
        right = tape.slice_axis(a, -1, 2, 5)
        return tape.tsum(left * left) + tape.tsum(right)
    assert check(build, (3, 5)) < 1e-7


def test_gather_rows():
    # One row per batch element, repeats allowed across the batch.
    idx = np.array([2, 0, 2])

    def build(a):
        return tape.tsum(tape.gather_rows(a, idx) ** 2)
    assert check(build, (3, 4, 5)) < 1e-7


def test_gather_rows_forward_values():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(0, 1, (2, 3, 4)))
    idx = np.array([1, 0])
    out = tape.gather_rows(a, idx).data
    np.testing.assert_array_equal(out[0], a.data[0, 1])
    np.testing.assert_array_equal(out[1], a.data[1, 0])


def test_diamond_graph_accumulates():
    # y = x*x used twice; gradient must accumulate 2x through both paths.
    p = Parameter("x", np.array([3.0]))
    y = p * p
    z = y + y
    z.backward()
    np.testing.assert_allclose(p.grad, [12.0])


def test_no_grad_blocks_graph():
    p = Parameter("x", np.ones((2, 2)))
    with tape.no_grad():
        y = p * p
    assert y.requires_grad is False


def test_item_and_detach():
    t = Tensor(np.array([[2.0]]))
    assert t.item() == 2.0
    p = Parameter("x", np.ones((2, 2)))
    d = (p * 3.0).detach()
    assert isinstance(d, Tensor) and d.requires_grad is False
    with pytest.raises(Exception):
        Tensor(np.ones((2, 2))).item()


def test_zero_grad_resets():
    p = Parameter("x", np.ones(3))
    tape.tsum(p * p).backward()
    assert np.any(p.grad != 0)
    p.zero_grad()
    assert np.all(p.grad == 0)


def test_backward_needs_scalar():
    p = Parameter("x", np.ones((2, 2)))
    with pytest.raises(Exception):
        (p * p).backward()


def test_deep_chain_is_iterative():
    # 3000 chained adds would overflow a recursive backward.
    p = Parameter("x", np.array([1.0]))
    y = p
    for _ in range(3000):
        y = y + p
    tape.tsum(y).backward()
    np.testing.assert_allclose(p.grad, [3001.0])
