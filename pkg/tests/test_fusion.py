"""Domain-aware fusion: conditioning, cross-fusion, scoring, losses."""

import math

import numpy as np
import pytest

from l2c import fusion, tape
from l2c.encoder import TokenSequence
from l2c.errors import DimensionError, ValidationError
from l2c.fusion import (AdaptedFeatures, DAFParams, clip_loss, cross_fuse,
                        logits, project_prompt, regression_loss, total_loss)
from l2c.numerics import l2_normalize
from l2c.tape import Parameter, Tensor

from oracles import oracle_clip_loss


def make_daf(dim=8, heads=2, seed=0):
    return DAFParams(dim, heads, np.random.default_rng(seed))


def random_feats(rng, b, c, d, per_image=True):
    img = rng.normal(0, 1, (b, d))
    img = img / np.linalg.norm(img, axis=-1, keepdims=True)
    shape = (b, c, d) if per_image else (c, d)
    protos = rng.normal(0, 1, shape)
    protos = protos / np.linalg.norm(protos, axis=-1, keepdims=True)
    return AdaptedFeatures(image_features=img, class_prototypes=protos)


def test_clip_loss_batch_of_one_is_exactly_zero():
    rng = np.random.default_rng(0)
    feats = random_feats(rng, 1, 3, 8)
    loss = clip_loss(feats, np.array([1]))
    assert loss.item() == 0.0


def test_clip_loss_zero_sims_closed_form():
    # images live in one subspace, paired prototypes in an orthogonal one,
    # so every similarity is 0 and both softmax rows are uniform over 2
    img = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    protos = np.zeros((2, 2, 4))
    protos[0, 0] = [0, 0, 1.0, 0]
    protos[0, 1] = [0, 0, 0, 1.0]
    protos[1, 0] = [0, 0, 1.0, 0]
    protos[1, 1] = [0, 0, 0, 1.0]
    feats = AdaptedFeatures(image_features=img, class_prototypes=protos)
    loss = clip_loss(feats, np.array([0, 1]))
    assert abs(loss.item() - 4.0 * math.log(2.0)) < 1e-9


@pytest.mark.parametrize("per_image", [True, False])
def test_clip_loss_matches_oracle(per_image):
    rng = np.random.default_rng(1)
    for trial in range(10):
        b = int(rng.integers(2, 6))
        c = int(rng.integers(2, 5))
        feats = random_feats(rng, b, c, 8, per_image=per_image)
        labels = rng.integers(0, c, b)
        scale = float(rng.uniform(0.5, 4.0))
        got = clip_loss(feats, labels, logit_scale=scale).item()
        protos = feats.class_prototypes
        if per_image:
            paired = protos[np.arange(b), labels]
        else:
            paired = protos[labels]
        want = oracle_clip_loss(feats.image_features, paired, scale)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_clip_loss_label_validation():
    rng = np.random.default_rng(2)
    feats = random_feats(rng, 3, 4, 8)
    with pytest.raises(DimensionError):
        clip_loss(feats, np.array([0, 1]))
    with pytest.raises(ValidationError):
        clip_loss(feats, np.array([0, 1, 4]))
    with pytest.raises(ValidationError):
        clip_loss(feats, np.array([0, -1, 2]))


def test_clip_loss_gradient_flows():
    rng = np.random.default_rng(3)
    img = Parameter("img", rng.normal(0, 1, (3, 8)))
    protos = Parameter("protos", rng.normal(0, 1, (3, 4, 8)))
    img.grad = np.zeros_like(img.data)
    protos.grad = np.zeros_like(protos.data)
    feats = AdaptedFeatures(image_features=l2_normalize(img),
                            class_prototypes=l2_normalize(protos))
    clip_loss(feats, np.array([0, 2, 1])).backward()
    assert np.abs(img.grad).max() > 0
    assert np.abs(protos.grad).max() > 0


def test_regression_loss_hand_value():
    img = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    protos = np.array([[0.5, 0.5]])
    feats = AdaptedFeatures(image_features=img, class_prototypes=protos)
    targets = np.array([1.0, 0.0, 0.5])
    preds = img @ protos[0]
    want = float(np.mean((preds - targets) ** 2))
    got = regression_loss(feats, targets).item()
    assert abs(got - want) < 1e-15


def test_regression_loss_per_image_prototypes():
    rng = np.random.default_rng(4)
    img = rng.normal(0, 1, (4, 6))
    protos = rng.normal(0, 1, (4, 1, 6))
    targets = rng.normal(0, 1, 4)
    feats = AdaptedFeatures(image_features=img, class_prototypes=protos)
    preds = np.einsum("bd,bd->b", img, protos[:, 0])
    want = float(np.mean((preds - targets) ** 2))
    assert abs(regression_loss(feats, targets).item() - want) < 1e-12


def test_regression_loss_validation():
    rng = np.random.default_rng(5)
    feats = random_feats(rng, 3, 2, 8)
    with pytest.raises(ValidationError):
        regression_loss(feats, np.zeros(3))
    feats1 = random_feats(rng, 3, 1, 8)
    with pytest.raises(DimensionError):
        regression_loss(feats1, np.zeros(2))


def test_total_loss_adds():
    a = Tensor(np.array(2.5))
    b = Tensor(np.array(0.25))
    assert total_loss(a, b).item() == 2.75
    zero = Tensor(np.array(0.0))
    assert total_loss(a, zero).item() == a.item()


def test_logits_shared_and_per_image():
    rng = np.random.default_rng(6)
    img = rng.normal(0, 1, (3, 5))
    shared = rng.normal(0, 1, (4, 5))
    feats = AdaptedFeatures(image_features=img, class_prototypes=shared)
    assert np.allclose(logits(feats), img @ shared.T)
    per = rng.normal(0, 1, (3, 4, 5))
    feats2 = AdaptedFeatures(image_features=Tensor(img),
                             class_prototypes=Tensor(per))
    want = np.einsum("bd,bcd->bc", img, per)
    assert np.allclose(logits(feats2), want)


def test_logits_batch_mismatch():
    rng = np.random.default_rng(7)
    feats = AdaptedFeatures(image_features=rng.normal(0, 1, (3, 5)),
                            class_prototypes=rng.normal(0, 1, (2, 4, 5)))
    with pytest.raises(DimensionError):
        logits(feats)


def test_project_and_fuse_shapes():
    daf = make_daf(dim=8)
    rng = np.random.default_rng(8)
    prompt = rng.normal(0, 1, (3, 8))
    text = rng.normal(0, 1, (4, 8))
    image = rng.normal(0, 1, (2, 5, 8))     # batched CLS-led tokens
    prompt_t, prompt_i = project_prompt(daf, prompt, text, image)
    assert prompt_t.shape == (3, 8)
    assert prompt_i.shape == (2, 3, 8)
    feats = cross_fuse(daf, prompt_t, prompt_i, image, text)
    assert feats.image_features.shape == (2, 8)
    assert feats.class_prototypes.shape == (2, 4, 8)
    assert feats.batch_size == 2
    assert feats.num_classes == 4
    norms = np.linalg.norm(feats.image_features.data, axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-12)
    pnorms = np.linalg.norm(feats.class_prototypes.data, axis=-1)
    assert np.allclose(pnorms, 1.0, atol=1e-12)


def test_project_prompt_width_check():
    daf = make_daf(dim=8)
    rng = np.random.default_rng(9)
    with pytest.raises(DimensionError):
        project_prompt(daf, rng.normal(0, 1, (3, 7)),
                       rng.normal(0, 1, (4, 8)), rng.normal(0, 1, (2, 5, 8)))


def test_fusion_rejects_headless_tokens():
    daf = make_daf(dim=8)
    rng = np.random.default_rng(10)
    seq = TokenSequence(tokens=rng.normal(0, 1, (5, 8)), has_cls=False)
    with pytest.raises(ValidationError):
        project_prompt(daf, rng.normal(0, 1, (3, 8)),
                       rng.normal(0, 1, (4, 8)), seq)


def test_fusion_accepts_token_sequence():
    daf = make_daf(dim=8)
    rng = np.random.default_rng(11)
    toks = rng.normal(0, 1, (5, 8))
    seq = TokenSequence(tokens=toks, has_cls=True)
    prompt = rng.normal(0, 1, (3, 8))
    text = rng.normal(0, 1, (4, 8))
    via_seq = project_prompt(daf, prompt, text, seq)
    via_raw = project_prompt(daf, prompt, text, toks)
    assert np.array_equal(via_seq[1].data, via_raw[1].data)
