import os
import sys

# Must be pinned before numpy loads so BLAS stays single-threaded.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from l2c.model import Model, ModelConfig
from l2c.synth import SynthConfig, generate
from l2c.text import greedy_ensemble
from l2c.trainer import TrainConfig, fit

TOY_SYNTH = dict(n_domains=3, n_classes=4, num_patches=4, patch_width=6,
                 dim=16, samples_per_class=16, n_target_domains=1,
                 n_templates=6, seed=0)
TOY_MODEL = dict(dim=16, num_patches=4, patch_width=6, num_classes=4,
                 cpnet_depth=1, frozen_depth=1, cache_size=3, init_seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(SynthConfig(**TOY_SYNTH))


@pytest.fixture(scope="session")
def tiny_prototypes(tiny_dataset):
    return greedy_ensemble(tiny_dataset.bundle)


@pytest.fixture()
def toy_model(tiny_prototypes):
    return Model(ModelConfig(**TOY_MODEL), tiny_prototypes.matrix)


@pytest.fixture(scope="session")
def trained_tiny(tiny_dataset):
    """A briefly trained toy model plus its checkpoint; shared read-only."""
    cfg = TrainConfig(epochs=2, batch_support=4, batch_query=8,
                      learning_rate=1e-2, seed=0)
    model, ckpt = fit(tiny_dataset, cfg,
                      model_config=ModelConfig(**TOY_MODEL))
    return model, ckpt


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
