"""Domain-aware fusion: condition the prompt, cross-fuse, score, and lose.

Stage one conditions the domain prompt on each modality (text prototypes,
image tokens) through two cross-attention blocks. Stage two swaps the
conditioned prompts back across modalities: image tokens query the
text-conditioned prompt (the CLS row becomes the adapted image feature),
and text prototypes query the image-conditioned prompt (becoming adapted,
per-image class prototypes). Both outputs are L2-normalized, so cosine
scoring is a plain dot product.

The contrastive loss pairs each image with the adapted prototype row of
its own label and sums symmetric InfoNCE terms over the batch; a batch of
one is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .blocks import CrossAttentionBlock
from .encoder import TokenSequence
from .errors import DimensionError, ValidationError
from .numerics import l2_normalize
from .tape import Tensor


class DAFParams:
    """Four independent cross-attention blocks, one per fusion arrow."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.dim = dim
        self.text_conditioner = CrossAttentionBlock(
            "daf.text_conditioner", dim, heads, rng)
        self.image_conditioner = CrossAttentionBlock(
            "daf.image_conditioner", dim, heads, rng)
        self.image_fuser = CrossAttentionBlock("daf.image_fuser", dim, heads, rng)
        self.text_fuser = CrossAttentionBlock("daf.text_fuser", dim, heads, rng)

    def parameters(self) -> list:
        return (self.text_conditioner.parameters()
                + self.image_conditioner.parameters()
                + self.image_fuser.parameters()
                + self.text_fuser.parameters())


@dataclass
class AdaptedFeatures:
    """Normalized image features (B, d) and class prototypes.

    ``class_prototypes`` is (B, C, d) when fusion adapts them per image,
    or a shared (C, d) matrix (single image, or fusion disabled).
    """

    image_features: object
    class_prototypes: object

    @property
    def batch_size(self) -> int:
        return self.image_features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_prototypes.shape[-2]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_width(what: str, x, dim: int):
    if x.shape[-1] != dim:
        raise DimensionError(what, dim, x.shape[-1])


def _unwrap_image(image):
    if isinstance(image, TokenSequence):
        if not image.has_cls:
            raise ValidationError("fusion needs CLS-led image tokens")
        return Tensor(image.tokens)
    return _as_tensor(image)


def project_prompt(daf: DAFParams, prompt, text, image):
    """Condition the prompt on each modality.

    Returns (text-conditioned prompt, image-conditioned prompt); the image
    side is per-image, (B, L+1, d), when image tokens are batched.
    """
    prompt = _as_tensor(prompt)
    text = _as_tensor(text)
    image = _unwrap_image(image)
    for what, x in (("prompt width", prompt), ("text width", text),
                    ("image width", image)):
        _check_width(what, x, daf.dim)
    prompt_t = daf.text_conditioner(prompt, text)
    prompt_i = daf.image_conditioner(prompt, image)
    return prompt_t, prompt_i


def cross_fuse(daf: DAFParams, prompt_t, prompt_i, image, text) -> AdaptedFeatures:
    """Fuse each modality through the other's conditioned prompt.

    Image tokens (CLS-led) query ``prompt_t``; the fused CLS row is the
    adapted image feature. Text prototypes query ``prompt_i``, yielding
    adapted class prototypes (per image when ``prompt_i`` is batched).
    Every output row is L2-normalized.
    """
    image = _unwrap_image(image)
    text = _as_tensor(text)
    fused_image = daf.image_fuser(image, _as_tensor(prompt_t))
    cls = tape.slice_axis(fused_image, -2, 0, 1)
    if cls.ndim == 3:
        cls = tape.reshape(cls, (cls.shape[0], cls.shape[2]))
    image_features = l2_normalize(cls)
    prototypes = l2_normalize(daf.text_fuser(text, _as_tensor(prompt_i)))
    return AdaptedFeatures(image_features=image_features,
                           class_prototypes=prototypes)


def logits(feats: AdaptedFeatures) -> np.ndarray:
    """Cosine-similarity scores, (B, C); inference-only (plain arrays)."""
    img = np.asarray(feats.image_features.data
                     if isinstance(feats.image_features, Tensor)
                     else feats.image_features)
    protos = np.asarray(feats.class_prototypes.data
                        if isinstance(feats.class_prototypes, Tensor)
                        else feats.class_prototypes)
    if img.ndim == 1:
        img = img[None, :]
    if protos.ndim == 2:
        return img @ protos.T
    if protos.shape[0] != img.shape[0]:
        raise DimensionError("per-image prototype batch", img.shape[0],
                             protos.shape[0])
    return np.einsum("bd,bcd->bc", img, protos)


def _paired_text(protos: Tensor, labels: np.ndarray) -> Tensor:
    """Row of each image's own label: (B, d)."""
    if protos.ndim == 3:
        return tape.gather_rows(protos, labels)
    onehot = np.zeros((labels.shape[0], protos.shape[0]))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return tape.matmul(Tensor(onehot), protos)


def clip_loss(feats: AdaptedFeatures, labels, logit_scale: float = 1.0) -> Tensor:
    """Symmetric InfoNCE over (image, own-label prototype) pairs.

    Both directions sum -log softmax of the matching diagonal over the
    batch; no label deduplication. B = 1 gives exactly 0.
    """
    img = _as_tensor(feats.image_features)
    protos = _as_tensor(feats.class_prototypes)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != img.shape[0]:
        raise DimensionError("label count", img.shape[0], labels.shape)
    c = protos.shape[-2]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(
            f"labels must lie in [0, {c}), got range "
            f"[{labels.min()}, {labels.max()}]")
    paired = _paired_text(protos, labels)
    sims = tape.matmul(img, tape.transpose(paired)) * logit_scale
    eye = np.eye(img.shape[0])
    image_to_text = tape.tsum(tape.log(tape.softmax(sims)) * eye)
    text_to_image = tape.tsum(tape.log(tape.softmax(tape.transpose(sims))) * eye)
    return -(image_to_text + text_to_image)


def regression_loss(feats: AdaptedFeatures, targets) -> Tensor:
    """Mean squared error of per-image feature/prototype dot products."""
    img = _as_tensor(feats.image_features)
    protos = _as_tensor(feats.class_prototypes)
    if protos.shape[-2] != 1:
        raise ValidationError(
            f"regression needs exactly one prototype row, got {protos.shape[-2]}")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (img.shape[0],):
        raise DimensionError("target count", (img.shape[0],), targets.shape)
    if protos.ndim == 3:
        flat = tape.reshape(protos, (protos.shape[0], protos.shape[2]))
    else:
        flat = protos
    preds = tape.tsum(img * flat, axis=-1)
    diff = preds - Tensor(targets)
    return tape.tmean(diff * diff)


def total_loss(task_term, dispersion_term):
    """Task loss plus the (already signed and scaled) dispersion term."""
    return task_term + dispersion_term
