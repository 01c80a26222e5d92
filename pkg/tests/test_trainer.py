"""Episodic training loop: sampling, schedule, logging, persistence."""

import csv
import math

import numpy as np
import pytest

from l2c.errors import ValidationError
from l2c.model import Model, ModelConfig
from l2c.store import checkpoint_hash, save_checkpoint
from l2c.trainer import (Episode, TrainConfig, build_model, cosine_lr,
                         erm_baseline_step, fit, sample_episode,
                         sample_pooled_batch, train_step)

from conftest import TOY_MODEL


def tiny_train_cfg(**over):
    base = dict(epochs=1, batch_support=3, batch_query=5, seed=0,
                learning_rate=1e-2)
    return TrainConfig(**{**base, **over})


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(sampling="stratified")
    with pytest.raises(ValidationError):
        TrainConfig(ensemble="best")
    with pytest.raises(ValidationError):
        TrainConfig(batch_support=0)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=-1)
    assert TrainConfig().batch_size == 64


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.5, 0, 10) == 0.5
    assert cosine_lr(0.5, 9, 10) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(0.5, 0, 1) == 0.5
    values = [cosine_lr(1.0, s, 20) for s in range(20)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_sample_episode_single_domain_disjoint(tiny_dataset):
    rng = np.random.default_rng(0)
    for _ in range(20):
        ep = sample_episode(tiny_dataset, rng, 4, 6)
        assert ep.domain_id in tiny_dataset.source_domains
        assert ep.support_indices.shape == (4,)
        assert ep.query_indices.shape == (6,)
        drawn = np.concatenate([ep.support_indices, ep.query_indices])
        assert len(set(drawn.tolist())) == 10
        assert set(tiny_dataset.domain_ids[drawn]) == {ep.domain_id}


def test_sample_episode_pool_too_small(tiny_dataset):
    rng = np.random.default_rng(0)
    pool = tiny_dataset.domain_indices(tiny_dataset.source_domains[0]).size
    with pytest.raises(ValidationError):
        sample_episode(tiny_dataset, rng, pool, 1)


def test_pooled_batch_crosses_domains(tiny_dataset):
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(10):
        ep = sample_pooled_batch(tiny_dataset, rng, 8, 8)
        assert ep.domain_id == -1
        drawn = np.concatenate([ep.support_indices, ep.query_indices])
        assert not set(tiny_dataset.domain_ids[drawn]) \
            & set(tiny_dataset.target_domains)
        seen |= set(tiny_dataset.domain_ids[drawn].tolist())
    assert len(seen) > 1


def test_train_step_updates_and_reports(tiny_dataset):
    cfg = tiny_train_cfg()
    model = build_model(tiny_dataset, ModelConfig(**TOY_MODEL), cfg)
    rng = np.random.default_rng(2)
    ep = sample_episode(tiny_dataset, rng, 3, 5)
    before = [p.data.copy() for p in model.parameters()]
    value, stats = train_step(model, tiny_dataset, ep, 1e-2, cfg)
    assert math.isfinite(value)
    assert "uniformity" in stats
    moved = any(not np.array_equal(b, p.data)
                for b, p in zip(before, model.parameters()))
    assert moved


def test_erm_step_same_machinery(tiny_dataset):
    cfg = tiny_train_cfg(sampling="erm")
    model = build_model(tiny_dataset, ModelConfig(**TOY_MODEL), cfg)
    rng = np.random.default_rng(3)
    ep = sample_pooled_batch(tiny_dataset, rng, 3, 5)
    value, _ = erm_baseline_step(model, tiny_dataset, ep, 1e-2, cfg)
    assert math.isfinite(value)


def test_build_model_defaults_from_dataset(tiny_dataset):
    cfg = tiny_train_cfg()
    model = build_model(tiny_dataset, None, cfg)
    sc = tiny_dataset.config
    assert model.config.dim == sc.dim
    assert model.config.num_classes == sc.n_classes
    assert model.config.num_patches == sc.num_patches


def test_build_model_ensemble_switch(tiny_dataset):
    greedy = build_model(tiny_dataset, ModelConfig(**TOY_MODEL),
                         tiny_train_cfg(ensemble="greedy"))
    average = build_model(tiny_dataset, ModelConfig(**TOY_MODEL),
                          tiny_train_cfg(ensemble="average"))
    assert not np.array_equal(greedy.prototypes, average.prototypes)


def test_fit_steps_per_epoch_and_log(tiny_dataset, tmp_path):
    cfg = tiny_train_cfg(epochs=2, batch_support=4, batch_query=12)
    pool = tiny_dataset.source_indices().size
    expected = 2 * math.ceil(pool / 16)
    log = tmp_path / "train_log.csv"
    model, ckpt = fit(tiny_dataset, cfg, model_config=ModelConfig(**TOY_MODEL),
                      log_path=log)
    with open(log, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "lr", "uniformity"]
    assert len(rows) - 1 == expected
    assert [int(r[0]) for r in rows[1:]] == list(range(expected))
    assert float(rows[-1][2]) == pytest.approx(0.0, abs=1e-15)
    for r in rows[1:]:
        assert math.isfinite(float(r[1]))


def test_fit_max_steps_truncates(tiny_dataset, tmp_path):
    cfg = tiny_train_cfg(epochs=5, batch_support=4, batch_query=12)
    log = tmp_path / "log.csv"
    fit(tiny_dataset, cfg, model_config=ModelConfig(**TOY_MODEL),
        log_path=log, max_steps=3)
    with open(log, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == 3
    # truncated schedule still decays to zero on its last step
    assert float(rows[-1][2]) == pytest.approx(0.0, abs=1e-15)


def test_fit_zero_epochs_returns_init(tiny_dataset):
    cfg = tiny_train_cfg(epochs=0)
    mcfg = ModelConfig(**TOY_MODEL)
    model, ckpt = fit(tiny_dataset, cfg, model_config=mcfg)
    fresh = build_model(tiny_dataset, mcfg, cfg)
    for a, b in zip(model.parameters(), fresh.parameters()):
        assert np.array_equal(a.data, b.data)


def test_fit_deterministic(tiny_dataset, tmp_path):
    cfg = tiny_train_cfg(epochs=1, batch_support=4, batch_query=12)
    mcfg = ModelConfig(**TOY_MODEL)
    _, a = fit(tiny_dataset, cfg, model_config=mcfg)
    _, b = fit(tiny_dataset, cfg, model_config=mcfg)
    save_checkpoint(a, tmp_path / "a")
    save_checkpoint(b, tmp_path / "b")
    assert checkpoint_hash(tmp_path / "a") == checkpoint_hash(tmp_path / "b")


def test_fit_checkpoint_carries_train_config(trained_tiny):
    _, ckpt = trained_tiny
    assert "train" in ckpt.config
    assert ckpt.config["train"]["epochs"] == 2
    assert "model" in ckpt.config


def test_fit_loss_decreases(trained_tiny, tiny_dataset):
    model, _ = trained_tiny
    cfg = TrainConfig(epochs=0)
    fresh = build_model(tiny_dataset, Model.from_checkpoint(
        model.to_checkpoint()).config, cfg)
    rng = np.random.default_rng(7)
    ep = sample_episode(tiny_dataset, rng, 4, 8)
    support = tiny_dataset.grids[ep.support_indices]
    query = tiny_dataset.grids[ep.query_indices]
    labels = tiny_dataset.class_ids[ep.query_indices]
    trained_loss = model.episode_loss(support, query, labels)[0].item()
    fresh_loss = fresh.episode_loss(support, query, labels)[0].item()
    assert trained_loss < fresh_loss
