"""Few-shot test-time domain adaptation on frozen encoders.

A frozen vision backbone is complemented by a small trainable network
whose output is gated through reverted attention, class text prototypes
are picked by a dispersion-maximizing greedy ensemble, and a learned
key-value cache turns a handful of unlabeled support images into a
domain prompt that conditions both the image and text branches.
"""

import os

# BLAS thread pools add nondeterministic reduction orders and oversubscribe
# small matmuls; single-threaded is reproducible and faster at this scale.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var, os

from . import tape  # noqa: E402
from .errors import (  # noqa: E402
    CacheDroppedError,
    DimensionError,
    L2CError,
    MissingBlobError,
    MissingFileError,
    NonFiniteError,
    ShapeMismatchError,
    StoreError,
    ValidationError,
    VersionError,
)
from .store import (  # noqa: E402
    Checkpoint,
    EmbeddingBundle,
    checkpoint_hash,
    load_bundle,
    load_checkpoint,
    load_prompt,
    save_bundle,
    save_checkpoint,
    save_prompt,
)
from .text import (  # noqa: E402
    TextPrototypes,
    atfd,
    average_ensemble,
    greedy_ensemble,
    refine,
    uniformity_loss,
)
from .encoder import FrozenEncoder, SyntheticImage, TokenSequence  # noqa: E402
from .cpnet import CPNet, complement, revert_attention  # noqa: E402
from .prompt import DomainCache, DomainPrompt, build_prompt  # noqa: E402
from .fusion import AdaptedFeatures, DAFParams, clip_loss  # noqa: E402
from .model import Model, ModelConfig  # noqa: E402
from .synth import SynthConfig, generate  # noqa: E402
from .trainer import TrainConfig, fit  # noqa: E402
from .runtime import AdaptedModel, adapt, evaluate, infer, predict  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AdaptedFeatures",
    "AdaptedModel",
    "CPNet",
    "CacheDroppedError",
    "Checkpoint",
    "DAFParams",
    "DimensionError",
    "DomainCache",
    "DomainPrompt",
    "EmbeddingBundle",
    "FrozenEncoder",
    "L2CError",
    "MissingBlobError",
    "MissingFileError",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "ShapeMismatchError",
    "StoreError",
    "SynthConfig",
    "SyntheticImage",
    "TextPrototypes",
    "TokenSequence",
    "TrainConfig",
    "ValidationError",
    "VersionError",
    "adapt",
    "atfd",
    "average_ensemble",
    "build_prompt",
    "checkpoint_hash",
    "clip_loss",
    "complement",
    "evaluate",
    "fit",
    "generate",
    "greedy_ensemble",
    "infer",
    "load_bundle",
    "load_checkpoint",
    "load_prompt",
    "predict",
    "refine",
    "revert_attention",
    "save_bundle",
    "save_checkpoint",
    "save_prompt",
    "tape",
    "uniformity_loss",
]
