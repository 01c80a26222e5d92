"""Two-phase gradient-free adaptation: build one prompt, then just score.

Phase one takes a trained checkpoint and a handful of unlabeled target
images, computes the domain prompt exactly as training did, and discards
the key-value cache — after that, any touch of the cache raises. Phase two
scores images through the frozen encoder, the complement network, and
fusion under the fixed prompt; nothing allocates gradient state and no
parameter moves.
"""

from __future__ import annotations

import numpy as np

from . import fusion, tape
from .errors import ValidationError
from .model import Model
from .store import Checkpoint
from .tape import Tensor

DEFAULT_SUPPORT_SIZE = 16

KNOWN_METRICS = ("accuracy", "macro_f1", "worst_group_accuracy", "pearson_r")


class AdaptedModel:
    """A model locked to one domain prompt, cache already dropped."""

    def __init__(self, model: Model, prompt: np.ndarray | None,
                 support_size: int):
        self.model = model
        self.prompt = None if prompt is None else np.asarray(prompt)
        self.support_size = support_size

    @property
    def cache_dropped(self) -> bool:
        return self.model.cache.dropped


def adapt(source, support_grids) -> AdaptedModel:
    """Compute the domain prompt from unlabeled support images, drop the cache.

    ``source`` is a Checkpoint or an already-built Model (which this call
    takes over: its cache is dropped). Pure forward; no parameter changes.
    """
    model = Model.from_checkpoint(source) if isinstance(source, Checkpoint) \
        else source
    support_grids = np.asarray(support_grids, dtype=np.float64)
    if support_grids.ndim != 3 or support_grids.shape[0] < 1:
        raise ValidationError(
            f"support must be a nonempty (b, l, f) stack, got shape "
            f"{support_grids.shape}")
    prompt = None
    if model.config.use_daf:
        with tape.no_grad():
            prompt = model.prompt_from_support(support_grids).data.copy()
    model.cache.drop()
    return AdaptedModel(model=model, prompt=prompt,
                        support_size=support_grids.shape[0])


def infer_batch(adapted: AdaptedModel, grids) -> np.ndarray:
    """Cosine logits (B, C) for a stack of grids under the fixed prompt."""
    grids = np.asarray(grids, dtype=np.float64)
    prompt = None if adapted.prompt is None else Tensor(adapted.prompt)
    with tape.no_grad():
        feats = adapted.model.adapted_features(prompt, grids)
    return fusion.logits(feats)


def infer(adapted: AdaptedModel, image) -> np.ndarray:
    """Logits for one image (grid or SyntheticImage): shape (1, C)."""
    grid = getattr(image, "grid", image)
    grid = np.asarray(grid, dtype=np.float64)
    return infer_batch(adapted, grid[None, :, :])


def predict(adapted: AdaptedModel, grids) -> np.ndarray:
    """Argmax class ids (classification) or dot-product scores (regression)."""
    scores = infer_batch(adapted, grids)
    if adapted.model.config.task == "regression":
        return scores[:, 0]
    return scores.argmax(axis=1)


# ---------------------------------------------------------------------------
# metrics


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    return float((y_true == y_pred).mean())


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean F1 over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValidationError("macro F1 of an empty set is undefined")
    scores = []
    for cls in np.unique(y_true):
        tp = float(np.sum((y_pred == cls) & (y_true == cls)))
        fp = float(np.sum((y_pred == cls) & (y_true != cls)))
        fn = float(np.sum((y_pred != cls) & (y_true == cls)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def worst_group_accuracy(y_true, y_pred, groups) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    groups = np.asarray(groups)
    if y_true.size == 0:
        raise ValidationError("worst-group accuracy of an empty set is undefined")
    return float(min(accuracy(y_true[groups == g], y_pred[groups == g])
                     for g in np.unique(groups)))


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.shape != b.shape:
        raise ValidationError("pearson r needs two equal-length series, n >= 2")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise ValidationError("pearson r undefined for a constant series")
    return float((da * db).sum() / denom)


def evaluate(adapted: AdaptedModel, grids, labels, groups=None,
             metrics=("accuracy", "macro_f1")) -> dict:
    """Score a labeled set and compute the requested metrics.

    ``groups`` (e.g. domain ids) feeds worst_group_accuracy; regression
    checkpoints report pearson_r against float targets.
    """
    grids = np.asarray(grids, dtype=np.float64)
    labels = np.asarray(labels)
    if grids.shape[0] == 0 or labels.shape[0] != grids.shape[0]:
        raise ValidationError("evaluation needs a nonempty labeled set")
    unknown = [m for m in metrics if m not in KNOWN_METRICS]
    if unknown:
        raise ValidationError(f"unknown metric {unknown[0]!r}")
    preds = predict(adapted, grids)
    report = {}
    for metric in metrics:
        if metric == "accuracy":
            report[metric] = accuracy(labels, preds)
        elif metric == "macro_f1":
            report[metric] = macro_f1(labels, preds)
        elif metric == "worst_group_accuracy":
            if groups is None:
                raise ValidationError(
                    "worst_group_accuracy needs group ids")
            report[metric] = worst_group_accuracy(labels, preds, groups)
        elif metric == "pearson_r":
            report[metric] = pearson_r(labels, preds)
    return report
