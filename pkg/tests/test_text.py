"""Dispersion measures, greedy template selection, prototype refinement."""

import math

import numpy as np
import pytest

from l2c import tape, text
from l2c.errors import ValidationError
from l2c.numerics import grad_check
from l2c.store import EmbeddingBundle
from l2c.tape import Parameter, Tensor
from oracles import oracle_atfd, oracle_greedy, oracle_uniformity


def bundle_from(data):
    data = np.asarray(data, dtype=np.float64)
    p, c, d = data.shape
    return EmbeddingBundle(templates=[f"t{i}" for i in range(p)],
                           classes=[f"c{i}" for i in range(c)],
                           dim=d, data=data)


# --- uniformity ---------------------------------------------------------


def test_uniformity_identical_rows_is_one():
    T = np.tile(np.array([1.0, -2.0, 0.5]), (4, 1))
    assert text.uniformity_loss(T) == 1.0


def test_uniformity_two_rows_closed_form():
    T = np.array([[0.0, 0.0], [1.0, 1.0]])
    # single unordered pair at squared distance 2
    assert math.isclose(text.uniformity_loss(T, t=2.0), math.exp(-4.0),
                        rel_tol=1e-12)


def test_uniformity_matches_oracle(rng):
    for _ in range(20):
        c = rng.integers(2, 9)
        d = rng.integers(1, 7)
        T = rng.normal(0, 1, (c, d))
        t = float(rng.uniform(0.5, 4.0))
        got = text.uniformity_loss(T, t=t)
        want = oracle_uniformity(T, t)
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_uniformity_tensor_mode_matches_float_mode(rng):
    T = rng.normal(0, 1, (5, 3))
    scalar = text.uniformity_loss(T)
    tens = text.uniformity_loss(Tensor(T))
    assert math.isclose(tens.item(), scalar, rel_tol=1e-12)


def test_uniformity_gradient(rng):
    p = Parameter("T", rng.normal(0, 1, (4, 3)))
    err = grad_check(lambda: text.uniformity_loss(p), [p])
    assert err < 1e-6


def test_uniformity_sum_is_ordered_pairs(rng):
    T = rng.normal(0, 1, (4, 3))
    mean_u = text.uniformity_loss(T)
    # ordered-pair raw sum counts each unordered pair twice
    assert math.isclose(text.uniformity_sum(T), mean_u * 4 * 3,
                        rel_tol=1e-12)


def test_uniformity_rejects_single_row():
    with pytest.raises(Exception):
        text.uniformity_loss(np.ones((1, 3)))


# --- atfd ----------------------------------------------------------------


def test_atfd_matches_oracle(rng):
    for _ in range(20):
        T = rng.normal(0, 2, (int(rng.integers(2, 10)), int(rng.integers(1, 6))))
        assert math.isclose(text.atfd(T), oracle_atfd(T), rel_tol=1e-12)


def test_atfd_hand_value():
    T = np.array([[0.0, 0.0], [2.0, 0.0]])  # centroid (1,0), both rows at 1
    assert math.isclose(text.atfd(T), 1.0, rel_tol=1e-12)


def test_atfd_gradient(rng):
    p = Parameter("T", rng.normal(0, 1, (4, 3)))
    err = grad_check(lambda: text.atfd(p), [p])
    assert err < 1e-6


# --- greedy ensembling ---------------------------------------------------


def test_greedy_matches_oracle_on_random_bundles(rng):
    for trial in range(30):
        p = int(rng.integers(2, 8))
        c = int(rng.integers(2, 6))
        d = int(rng.integers(2, 5))
        data = rng.normal(0, 1, (p, c, d))
        crit = "uniformity" if trial % 2 == 0 else "atfd"
        got = text.greedy_ensemble(bundle_from(data), criterion=crit)
        kept, final = oracle_greedy(data, criterion=crit)
        assert got.selected_template_indices == kept
        np.testing.assert_allclose(got.matrix, final, rtol=1e-12)


def test_greedy_accepts_complementary_templates():
    # Two templates each collapse a different class pair; their average
    # separates both pairs, so the second must be accepted.
    base = np.eye(4, 5) * 2.0
    t0 = base.copy()
    t0[1] = t0[0]
    t1 = base.copy()
    t1[3] = t1[2]
    got = text.greedy_ensemble(bundle_from(np.stack([t0, t1])))
    assert len(got.selected_template_indices) == 2


def test_greedy_rejects_collapsed_template():
    base = np.eye(4, 5) * 2.0
    junk = np.ones((4, 5))  # fully collapsed: all classes identical
    got = text.greedy_ensemble(bundle_from(np.stack([base, junk])))
    assert got.selected_template_indices == [0]


def test_greedy_rejects_duplicate_of_seed():
    base = np.eye(3, 4)
    got = text.greedy_ensemble(bundle_from(np.stack([base, base.copy()])))
    # averaging an identical copy cannot strictly improve
    assert got.selected_template_indices == [0]


def test_greedy_tie_break_by_index():
    base = np.eye(3, 4)
    got = text.greedy_ensemble(bundle_from(np.stack([base, base.copy()])))
    assert got.selected_template_indices[0] == 0


def test_greedy_final_not_worse_than_best_single(rng):
    for _ in range(10):
        data = rng.normal(0, 1, (5, 4, 3))
        got = text.greedy_ensemble(bundle_from(data))
        singles = [text.uniformity_loss(data[i]) for i in range(5)]
        assert text.uniformity_loss(got.matrix) <= min(singles) + 1e-15


def test_ensemble_trace_monotone(rng):
    data = rng.normal(0, 1, (6, 4, 3))
    got = text.greedy_ensemble(bundle_from(data))
    trace = text.ensemble_trace(bundle_from(data),
                                got.selected_template_indices)
    for a, b in zip(trace, trace[1:]):
        assert b < a


def test_average_ensemble_is_plain_mean(rng):
    data = rng.normal(0, 1, (4, 3, 5))
    got = text.average_ensemble(bundle_from(data))
    np.testing.assert_allclose(got.matrix, data.mean(axis=0), rtol=1e-12)
    assert got.selected_template_indices == [0, 1, 2, 3]


def test_greedy_atfd_prefers_spread(rng):
    data = rng.normal(0, 1, (4, 3, 5))
    got = text.greedy_ensemble(bundle_from(data), criterion="atfd")
    singles = [text.atfd(data[i]) for i in range(4)]
    assert text.atfd(got.matrix) >= max(singles) - 1e-15


def test_greedy_unknown_criterion():
    with pytest.raises(ValidationError):
        text.greedy_ensemble(bundle_from(np.ones((2, 3, 4))), criterion="x")


# --- refinement ----------------------------------------------------------


def test_refine_is_identity_at_init(rng):
    T = rng.normal(0, 1, (4, 6))
    params = text.RefinementParams(4, 6)
    out = text.refine(Tensor(T), params)
    np.testing.assert_allclose(out.data, T, rtol=1e-15)


def test_refine_tensor_mode_gradients(rng):
    T = rng.normal(0, 1, (3, 4))
    params = text.RefinementParams(3, 4)
    ps = params.parameters()

    def loss_fn():
        return text.uniformity_loss(text.refine(Tensor(T), params))
    assert grad_check(loss_fn, ps) < 1e-6


def test_refine_shape_check(rng):
    params = text.RefinementParams(3, 4)
    with pytest.raises(Exception):
        text.refine(Tensor(rng.normal(0, 1, (4, 4))), params)


def test_refinement_grad_through_uniformity_tight(rng):
    # Dispersion-of-refined-prototypes path at tight tolerance. Row scale
    # 0.35 keeps pairwise distances O(1) so the loss is well above the
    # finite-difference noise floor.
    T = rng.normal(0, 0.35, (4, 5))
    params = text.RefinementParams(4, 5)
    for p in params.parameters():
        p.data += rng.normal(0, 0.05, p.data.shape)

    def loss_fn():
        return text.uniformity_loss(text.refine(Tensor(T), params))
    assert grad_check(loss_fn, params.parameters()) < 1e-6


# --- regularizer ---------------------------------------------------------


def test_regularizer_lambda_zero_is_exact_zero(rng):
    T = Tensor(rng.normal(0, 1, (4, 3)))
    reg = text.uniformity_regularizer(T, 0.0)
    assert reg.item() == 0.0


def test_regularizer_signs(rng):
    T = rng.normal(0, 1, (4, 3))
    u = text.uniformity_regularizer(Tensor(T), 0.5).item()
    assert math.isclose(u, 0.5 * text.uniformity_loss(T), rel_tol=1e-12)
    a = text.uniformity_regularizer(Tensor(T), 0.5, criterion="atfd").item()
    assert math.isclose(a, -0.5 * text.atfd(T), rel_tol=1e-12)


# --- persistence ---------------------------------------------------------


def test_prototypes_roundtrip(tmp_path, rng):
    data = rng.normal(0, 1, (5, 4, 3))
    got = text.greedy_ensemble(bundle_from(data))
    text.save_prototypes(got, tmp_path / "p")
    back = text.load_prototypes(tmp_path / "p")
    np.testing.assert_array_equal(back.matrix, got.matrix)
    assert back.provenance == got.provenance
    assert back.selected_template_indices == got.selected_template_indices
