"""Episodic domain-centric training and the domain-agnostic baseline.

Each step samples one source domain, splits a disjoint support/query batch
inside it, builds the domain prompt from the support half, adapts the
query half, and takes one SGD step on the five learnable groups. The
baseline ignores domains: its batch is pooled uniformly and the prompt
comes from the batch's own support slice.

The learning rate follows cosine decay from the configured value to
exactly zero on the final step. With a fixed seed the whole run is
deterministic, so two runs produce byte-identical checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ValidationError
from .model import Model, ModelConfig
from .numerics import sgd_step, zero_grads
from .synth import SynthDataset
from .text import average_ensemble, greedy_ensemble


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-3
    epochs: int = 20
    batch_support: int = 12
    batch_query: int = 52
    lam: float = 0.1
    seed: int = 0
    criterion: str = "uniformity"
    uniformity_t: float = 2.0
    task: str = "classification"
    sampling: str = "domain-centric"
    ensemble: str = "greedy"

    def __post_init__(self):
        if self.sampling not in ("domain-centric", "erm"):
            raise ValidationError(
                f"sampling must be domain-centric or erm, got {self.sampling!r}")
        if self.ensemble not in ("greedy", "average"):
            raise ValidationError(
                f"ensemble must be greedy or average, got {self.ensemble!r}")
        if self.batch_support < 1 or self.batch_query < 1:
            raise ValidationError("batch split parts must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.batch_support + self.batch_query


@dataclass
class Episode:
    """One sampled training unit; indices point into the dataset."""

    domain_id: int
    support_indices: np.ndarray
    query_indices: np.ndarray


def sample_episode(dataset: SynthDataset, rng: np.random.Generator,
                   batch_support: int, batch_query: int) -> Episode:
    """Uniformly pick a source domain, then a disjoint support/query split."""
    domains = dataset.source_domains
    domain_id = int(domains[rng.integers(len(domains))])
    pool = dataset.domain_indices(domain_id)
    need = batch_support + batch_query
    if pool.size < need:
        raise ValidationError(
            f"domain {domain_id} has {pool.size} samples, episode needs {need}")
    drawn = rng.choice(pool, size=need, replace=False)
    return Episode(domain_id=domain_id,
                   support_indices=drawn[:batch_support],
                   query_indices=drawn[batch_support:])


def sample_pooled_batch(dataset: SynthDataset, rng: np.random.Generator,
                        batch_support: int, batch_query: int) -> Episode:
    """Domain-agnostic batch over every source sample (baseline sampling)."""
    pool = dataset.source_indices()
    need = batch_support + batch_query
    if pool.size < need:
        raise ValidationError(
            f"source split has {pool.size} samples, batch needs {need}")
    drawn = rng.choice(pool, size=need, replace=False)
    return Episode(domain_id=-1,
                   support_indices=drawn[:batch_support],
                   query_indices=drawn[batch_support:])


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base`` at step 0 to exactly 0 on the last step."""
    if total_steps <= 1:
        return base
    return base * (1.0 + math.cos(math.pi * step / (total_steps - 1))) / 2.0


def _episode_targets(dataset: SynthDataset, episode: Episode, task: str):
    labels = dataset.class_ids[episode.query_indices]
    if task == "regression":
        return labels.astype(np.float64)
    return labels


def train_step(model: Model, dataset: SynthDataset, episode: Episode,
               lr: float, config: TrainConfig) -> tuple:
    """One forward/backward/SGD update; returns (loss value, stats)."""
    support = dataset.grids[episode.support_indices]
    query = dataset.grids[episode.query_indices]
    targets = _episode_targets(dataset, episode, config.task)
    params = model.parameters()
    zero_grads(params)
    loss, stats = model.episode_loss(support, query, targets,
                                     lam=config.lam,
                                     criterion=config.criterion,
                                     t=config.uniformity_t)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(
            f"non-finite loss on domain {episode.domain_id}, "
            f"support {episode.support_indices.tolist()}, "
            f"query {episode.query_indices.tolist()}")
    loss.backward()
    sgd_step(params, lr)
    return value, stats


def erm_baseline_step(model: Model, dataset: SynthDataset, episode: Episode,
                      lr: float, config: TrainConfig) -> tuple:
    """Identical update on a pooled batch; the prompt comes from the batch."""
    return train_step(model, dataset, episode, lr, config)


def build_model(dataset: SynthDataset, model_config: ModelConfig | None,
                train_config: TrainConfig) -> Model:
    """Fresh model over the dataset's ensembled text prototypes."""
    cfg = model_config
    if cfg is None:
        sc = dataset.config
        cfg = ModelConfig(dim=sc.dim, num_patches=sc.num_patches,
                          patch_width=sc.patch_width,
                          num_classes=sc.n_classes, task=train_config.task)
    if train_config.ensemble == "greedy":
        prototypes = greedy_ensemble(dataset.bundle,
                                     criterion=train_config.criterion,
                                     t=train_config.uniformity_t)
    else:
        prototypes = average_ensemble(dataset.bundle)
    return Model(cfg, prototypes.matrix)


def fit(dataset: SynthDataset, config: TrainConfig,
        model: Model | None = None, model_config: ModelConfig | None = None,
        log_path=None, max_steps: int | None = None) -> tuple:
    """Run the episodic loop; returns (model, checkpoint).

    Steps per epoch = ceil(source split size / batch size). ``max_steps``
    truncates the schedule (the cosine decay then spans the truncated
    total), which keeps desk-scale runs fast without changing semantics.
    """
    if model is None:
        model = build_model(dataset, model_config, config)
    rng = np.random.default_rng(config.seed)
    pool_size = dataset.source_indices().size
    steps_per_epoch = max(1, math.ceil(pool_size / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "lr", "uniformity"])
    try:
        for step in range(total_steps):
            lr = cosine_lr(config.learning_rate, step, total_steps)
            if config.sampling == "erm":
                episode = sample_pooled_batch(dataset, rng,
                                              config.batch_support,
                                              config.batch_query)
                value, stats = erm_baseline_step(model, dataset, episode, lr,
                                                 config)
            else:
                episode = sample_episode(dataset, rng, config.batch_support,
                                         config.batch_query)
                value, stats = train_step(model, dataset, episode, lr, config)
            if writer is not None:
                writer.writerow([step, repr(value), repr(lr),
                                 repr(stats["uniformity"])])
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = model.to_checkpoint(extra_config={"train": asdict(config)})
    return model, ckpt
