"""Text-prototype dispersion metrics, greedy ensembling, and refinement.

A template's C class embeddings form a C x d matrix. Dispersion is measured
two ways: a pairwise-Gaussian uniformity score (lower = more spread) and the
mean distance of class rows from their centroid (higher = more spread).
Greedy ensembling ranks templates by dispersion and keeps one only when it
strictly improves the averaged ensemble. The refinement residual then lets
training adjust the frozen prototypes along both the class and feature axes
without destroying their initialization.

Metric functions accept either a plain array (returning a float) or a tape
Tensor (returning a differentiable scalar Tensor); the training path uses
the Tensor form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import DimensionError, NonFiniteError, ValidationError
from .store import (
    EmbeddingBundle,
    dump_json,
    read_array,
    read_json,
    staged_dir,
    write_array,
    _check_layout,
    _check_version,
    _require_dir,
)
from .tape import Parameter, Tensor

PROTOTYPES_VERSION = 1

RAW_ENSEMBLE = "raw-ensemble"
REFINED = "refined"


@dataclass
class TextPrototypes:
    """One C x d class-prototype matrix plus how it was produced."""

    matrix: np.ndarray
    provenance: str = RAW_ENSEMBLE
    selected_template_indices: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError("prototype matrix rank", 2, self.matrix.ndim)
        if self.provenance not in (RAW_ENSEMBLE, REFINED):
            raise ValidationError(
                f"provenance must be {RAW_ENSEMBLE!r} or {REFINED!r}, "
                f"got {self.provenance!r}")
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteError("prototype matrix contains non-finite values")

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


class RefinementParams:
    """Learnable residual transforms over the prototype matrix.

    ``class_transform`` (C x C) starts at zero and ``feature_transform``
    (d x d) at identity, so refinement is the identity map at step 0.
    """

    def __init__(self, num_classes: int, dim: int):
        self.class_transform = Parameter(
            "refine.class_transform", np.zeros((num_classes, num_classes)))
        self.feature_transform = Parameter(
            "refine.feature_transform", np.eye(dim))

    def parameters(self) -> list:
        return [self.class_transform, self.feature_transform]


def _check_dispersion_input(shape, t: float | None = None):
    if len(shape) != 2:
        raise DimensionError("dispersion input rank", 2, len(shape))
    if shape[0] < 2:
        raise ValidationError(
            f"dispersion metrics need at least 2 classes, got {shape[0]}")
    if t is not None and t <= 0:
        raise ValidationError(f"temperature t must be positive, got {t}")


def _pairwise_exp_sum(T: np.ndarray, t: float) -> float:
    """Sum over all ordered pairs i != j of exp(-t * ||T_i - T_j||^2)."""
    sq = ((T[:, None, :] - T[None, :, :]) ** 2).sum(axis=-1)
    return float(np.exp(-t * sq).sum() - T.shape[0])


def uniformity_loss(T, t: float = 2.0):
    """Mean over unordered class pairs of exp(-t * squared distance).

    1.0 when every class prototype coincides; approaches 0 as classes
    spread. Lower is better.
    """
    if isinstance(T, Tensor):
        _check_dispersion_input(T.shape, t)
        c, d = T.shape
        diff = tape.reshape(T, (c, 1, d)) - tape.reshape(T, (1, c, d))
        sq = tape.tsum(diff * diff, axis=-1)
        total = tape.tsum(tape.exp(sq * (-t)))
        return (total - float(c)) / float(c * (c - 1))
    T = np.asarray(T, dtype=np.float64)
    _check_dispersion_input(T.shape, t)
    c = T.shape[0]
    return _pairwise_exp_sum(T, t) / (c * (c - 1))


def uniformity_sum(T, t: float = 2.0) -> float:
    """Diagnostic: the raw ordered-pair sum behind uniformity_loss."""
    T = np.asarray(T, dtype=np.float64)
    _check_dispersion_input(T.shape, t)
    return _pairwise_exp_sum(T, t)


def atfd(T):
    """Mean Euclidean distance of class rows from their centroid.

    Higher is better (more dispersed).
    """
    if isinstance(T, Tensor):
        _check_dispersion_input(T.shape)
        centroid = tape.tmean(T, axis=0, keepdims=True)
        diff = T - centroid
        dist = tape.sqrt(tape.tsum(diff * diff, axis=-1))
        return tape.tmean(dist)
    T = np.asarray(T, dtype=np.float64)
    _check_dispersion_input(T.shape)
    centroid = T.mean(axis=0, keepdims=True)
    return float(np.linalg.norm(T - centroid, axis=-1).mean())


_CRITERIA = ("uniformity", "atfd")


def _score(T: np.ndarray, criterion: str, t: float) -> float:
    if criterion == "uniformity":
        return uniformity_loss(T, t)
    return atfd(T)


def _improves(candidate: float, incumbent: float, criterion: str) -> bool:
    # Strict inequality: ties never grow the ensemble.
    if criterion == "uniformity":
        return candidate < incumbent
    return candidate > incumbent


def greedy_ensemble(bundle: EmbeddingBundle, criterion: str = "uniformity",
                    t: float = 2.0) -> TextPrototypes:
    """Build the averaged template ensemble by greedy dispersion search.

    Templates are ranked best-first (ascending uniformity, or descending
    centroid dispersion), the best seeds the ensemble, and each later
    template is kept only if averaging it in strictly improves the
    criterion. Ties in the ranking fall back to original template order.
    """
    if criterion not in _CRITERIA:
        raise ValidationError(
            f"criterion must be one of {_CRITERIA}, got {criterion!r}")
    stack = bundle.data
    p = stack.shape[0]
    if stack.shape[1] < 2:
        raise ValidationError(
            f"greedy ensembling needs at least 2 classes, got {stack.shape[1]}")
    scores = [_score(stack[i], criterion, t) for i in range(p)]
    if criterion == "uniformity":
        order = sorted(range(p), key=lambda i: (scores[i], i))
    else:
        order = sorted(range(p), key=lambda i: (-scores[i], i))

    kept = [order[0]]
    running_sum = stack[order[0]].copy()
    incumbent = scores[order[0]]
    for idx in order[1:]:
        candidate_matrix = (running_sum + stack[idx]) / (len(kept) + 1)
        candidate = _score(candidate_matrix, criterion, t)
        if _improves(candidate, incumbent, criterion):
            kept.append(idx)
            running_sum += stack[idx]
            incumbent = candidate
    matrix = running_sum / len(kept)
    return TextPrototypes(matrix=matrix, provenance=RAW_ENSEMBLE,
                          selected_template_indices=kept)


def ensemble_trace(bundle: EmbeddingBundle, indices, criterion: str = "uniformity",
                   t: float = 2.0) -> list:
    """Criterion value of the running average after each kept template.

    Replays an acceptance sequence (e.g. ``selected_template_indices``);
    with the uniformity criterion the values are strictly decreasing.
    """
    if not indices:
        raise ValidationError("trace needs at least one template index")
    total = np.zeros_like(bundle.data[0])
    values = []
    for n, idx in enumerate(indices, start=1):
        total = total + bundle.data[idx]
        values.append(_score(total / n, criterion, t))
    return values


def average_ensemble(bundle: EmbeddingBundle) -> TextPrototypes:
    """Plain mean over every template; the no-greedy ablation baseline."""
    matrix = bundle.data.mean(axis=0)
    return TextPrototypes(matrix=matrix, provenance=RAW_ENSEMBLE,
                          selected_template_indices=list(range(bundle.data.shape[0])))


def refine(prototypes, params: RefinementParams):
    """Residual refinement: class_transform @ T @ feature_transform + T.

    Accepts a Tensor (differentiable, for training) or TextPrototypes
    (returns a refined TextPrototypes).
    """
    ct, ft = params.class_transform, params.feature_transform
    if isinstance(prototypes, Tensor):
        c, d = prototypes.shape
    else:
        c, d = prototypes.matrix.shape
    if ct.shape != (c, c):
        raise DimensionError("class_transform shape", (c, c), ct.shape)
    if ft.shape != (d, d):
        raise DimensionError("feature_transform shape", (d, d), ft.shape)
    if isinstance(prototypes, Tensor):
        return tape.matmul(tape.matmul(ct, prototypes), ft) + prototypes
    base = Tensor(prototypes.matrix)
    with tape.no_grad():
        refined = tape.matmul(tape.matmul(ct, base), ft) + base
    return TextPrototypes(matrix=refined.data, provenance=REFINED,
                          selected_template_indices=list(
                              prototypes.selected_template_indices))


def uniformity_regularizer(T, lam: float, criterion: str = "uniformity",
                           t: float = 2.0):
    """Dispersion term of the training loss, scaled by lam.

    Uniformity mode adds lam * uniformity (pushing prototypes apart);
    centroid mode subtracts lam * dispersion, flipping the sign so that
    maximizing dispersion still minimizes the loss.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be nonnegative, got {lam}")
    if criterion not in _CRITERIA:
        raise ValidationError(
            f"criterion must be one of {_CRITERIA}, got {criterion!r}")
    if lam == 0.0:
        return Tensor(0.0) if isinstance(T, Tensor) else 0.0
    if criterion == "uniformity":
        return uniformity_loss(T, t) * lam
    return atfd(T) * (-lam)


def save_prototypes(prototypes: TextPrototypes, path) -> None:
    sidecar = {
        "version": PROTOTYPES_VERSION,
        "shape": list(prototypes.matrix.shape),
        "dtype": "f64",
        "layout": "row-major",
        "provenance": prototypes.provenance,
        "selected_template_indices": list(prototypes.selected_template_indices),
        "data": "prototypes.bin",
    }
    with staged_dir(path) as tmp:
        write_array(tmp / "prototypes.bin", prototypes.matrix, "f64")
        (tmp / "prototypes.json").write_text(dump_json(sidecar))


def load_prototypes(path) -> TextPrototypes:
    path = _require_dir(path, "prototypes")
    sidecar = read_json(path / "prototypes.json")
    _check_version(sidecar, PROTOTYPES_VERSION, "prototypes")
    _check_layout(sidecar, "prototypes")
    matrix = read_array(path / sidecar["data"], sidecar["shape"], "f64",
                        "prototype data")
    return TextPrototypes(matrix=matrix, provenance=sidecar["provenance"],
                          selected_template_indices=list(
                              sidecar["selected_template_indices"]))
