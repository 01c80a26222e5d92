"""The assembled few-shot adaptation model and its checkpoint mapping.

A model owns the frozen encoder (never trained), the five learnable groups
(complement network, domain cache, domain token, fusion blocks, text
refinement), and the fixed ensembled text prototypes. ``episode_loss``
wires one full training forward: support patches -> domain prompt, query
images -> complemented tokens, refined text, fusion, contrastive loss plus
the dispersion term.

Ablation switches live in the config so a checkpoint replays with the
exact forward path it was trained under: disabling fusion drops the whole
domain branch (scores become cosine of complemented CLS against refined
text), disabling revert attention adds the complement output unmasked, and
disabling refinement scores against the raw ensemble.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import fusion, tape
from .cpnet import CPNet, revert_attention
from .encoder import FrozenEncoder
from .errors import (
    DimensionError,
    MissingBlobError,
    ShapeMismatchError,
    ValidationError,
)
from .fusion import AdaptedFeatures, DAFParams, clip_loss, cross_fuse, project_prompt
from .numerics import l2_normalize
from .prompt import DomainCache, DomainToken, build_prompt
from .store import Checkpoint
from .tape import Tensor
from .text import RefinementParams, refine, uniformity_loss, uniformity_regularizer

PROTOTYPES_BLOB = "text.prototypes"


@dataclass
class ModelConfig:
    """Architecture plus forward-path switches; everything JSON-safe."""

    dim: int = 32
    num_patches: int = 9
    patch_width: int = 16
    num_classes: int = 8
    cpnet_depth: int = 2
    frozen_depth: int = 2
    heads: int = 1
    cache_size: int = 5
    encoder_seed: int = 7
    init_seed: int = 0
    logit_scale: float = 1.0
    use_revert_attention: bool = True
    use_daf: bool = True
    use_refinement: bool = True
    task: str = "classification"

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValidationError(
                f"task must be classification or regression, got {self.task!r}")
        if self.task == "regression" and self.num_classes != 1:
            raise ValidationError("regression uses exactly one prototype row")


class Model:
    """Frozen encoder + the five learnable groups + fixed prototypes."""

    def __init__(self, config: ModelConfig, prototypes: np.ndarray):
        self.config = config
        prototypes = np.asarray(prototypes, dtype=np.float64)
        expected = (config.num_classes, config.dim)
        if prototypes.shape != expected:
            raise DimensionError("prototype matrix shape", expected,
                                 prototypes.shape)
        self.prototypes = prototypes.copy()
        self.prototypes.flags.writeable = False
        self.encoder = FrozenEncoder(config.encoder_seed, config.num_patches,
                                     config.patch_width, config.dim,
                                     config.frozen_depth, config.heads)
        rng = np.random.default_rng(config.init_seed)
        self.cpnet = CPNet(config.dim, config.cpnet_depth, config.heads, rng)
        self.cache = DomainCache(config.cache_size, config.dim, rng)
        self.domain_token = DomainToken(config.dim, rng)
        self.daf = DAFParams(config.dim, config.heads, rng)
        self.refinement = RefinementParams(config.num_classes, config.dim)

    # -- parameters --

    def parameter_groups(self) -> dict:
        return {
            "cpnet": self.cpnet.parameters(),
            "cache": self.cache.parameters(),
            "domain_token": self.domain_token.parameters(),
            "daf": self.daf.parameters(),
            "refinement": self.refinement.parameters(),
        }

    def parameters(self) -> list:
        return [p for group in self.parameter_groups().values() for p in group]

    # -- forward pieces --

    def refined_text(self) -> Tensor:
        base = Tensor(self.prototypes)
        if not self.config.use_refinement:
            return base
        return refine(base, self.refinement)

    def complemented_tokens(self, grids: np.ndarray) -> Tensor:
        """Frozen features plus the (gated) complement correction."""
        frozen = Tensor(self.encoder.encode_batch(grids))
        cp_out = self.cpnet.forward(Tensor(self.encoder.input_tokens(grids)))
        if self.config.use_revert_attention:
            _, correction = revert_attention(cp_out, frozen)
        else:
            correction = cp_out
        return frozen + correction

    def prompt_from_support(self, support_grids: np.ndarray) -> Tensor:
        patches = self.encoder.patch_tokens(support_grids)
        return build_prompt(self.cpnet, self.domain_token, self.cache, patches)

    def adapted_features(self, prompt, query_grids: np.ndarray,
                         refined: Tensor | None = None) -> AdaptedFeatures:
        """Fusion output for a stack of query grids under one prompt."""
        tokens = self.complemented_tokens(query_grids)
        text = self.refined_text() if refined is None else refined
        if not self.config.use_daf:
            cls = tape.slice_axis(tokens, -2, 0, 1)
            cls = tape.reshape(cls, (cls.shape[0], cls.shape[2]))
            return AdaptedFeatures(image_features=l2_normalize(cls),
                                   class_prototypes=l2_normalize(text))
        if prompt is None:
            raise ValidationError("fusion needs a domain prompt")
        prompt_t, prompt_i = project_prompt(self.daf, prompt, text, tokens)
        return cross_fuse(self.daf, prompt_t, prompt_i, tokens, text)

    # -- training objective --

    def episode_loss(self, support_grids, query_grids, labels,
                     lam: float = 0.1, criterion: str = "uniformity",
                     t: float = 2.0):
        """Full-episode loss; returns (scalar Tensor, stats dict)."""
        refined = self.refined_text()
        prompt = (self.prompt_from_support(support_grids)
                  if self.config.use_daf else None)
        feats = self.adapted_features(prompt, query_grids, refined)
        if self.config.task == "regression":
            task_term = fusion.regression_loss(feats, labels)
            loss = task_term
            stats = {"task": float(task_term.data), "uniformity": 0.0}
        else:
            task_term = clip_loss(feats, labels, self.config.logit_scale)
            disp = uniformity_regularizer(refined, lam, criterion, t)
            loss = fusion.total_loss(task_term, disp)
            stats = {
                "task": float(task_term.data),
                "uniformity": float(uniformity_loss(refined.data, t)),
            }
        return loss, stats

    # -- persistence --

    def to_checkpoint(self, extra_config: dict | None = None) -> Checkpoint:
        blobs = {p.name: p.data.copy() for p in self.parameters()}
        blobs[PROTOTYPES_BLOB] = self.prototypes.copy()
        config = {"model": asdict(self.config)}
        if extra_config:
            config.update(extra_config)
        return Checkpoint(blobs=blobs, config=config)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Model":
        if "model" not in ckpt.config:
            raise ValidationError("checkpoint config lacks a 'model' section")
        config = ModelConfig(**ckpt.config["model"])
        if PROTOTYPES_BLOB not in ckpt.blobs:
            raise MissingBlobError(f"checkpoint blob {PROTOTYPES_BLOB!r} missing")
        model = cls(config, ckpt.blobs[PROTOTYPES_BLOB])
        expected = {p.name: p for p in model.parameters()}
        stored = set(ckpt.blobs) - {PROTOTYPES_BLOB}
        missing = sorted(set(expected) - stored)
        if missing:
            raise MissingBlobError(f"checkpoint blob {missing[0]!r} missing")
        unknown = sorted(stored - set(expected))
        if unknown:
            raise ValidationError(f"checkpoint has unknown blob {unknown[0]!r}")
        for name, param in expected.items():
            blob = ckpt.blobs[name]
            if blob.shape != param.data.shape:
                raise ShapeMismatchError(
                    f"checkpoint blob {name!r}: expected shape "
                    f"{param.data.shape}, got {blob.shape}")
            param.data = blob.copy()
            param.grad = np.zeros_like(param.data)
        return model
