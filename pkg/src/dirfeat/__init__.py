"""Directional deep feature learning for re-identification.

A self-contained, float64 CNN micro-framework: a shortly-and-densely
connected backbone, four directional average-pooling layers with exact
forward/backward passes, spatial normalization, the softmax + L2 training
recipe, descriptor extraction and CMC/mAP evaluation, all verified against
finite-difference and brute-force oracles at desk scale.
"""

import os

# Seeded runs promise bit-exact reproducibility, which only holds for a
# fixed BLAS thread count; default to one thread unless the caller already
# chose otherwise.  Must happen before numpy is first imported.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var, os

from . import tensor  # noqa: E402
from .evaluate import EvalReport, Record, evaluate, vehicleid_split  # noqa: E402
from .network import (  # noqa: E402
    BranchNetwork,
    DirectionalModel,
    NetworkConfig,
    full_config,
    toy_config,
)
from .training import TrainConfig, TrainingSet, train_model  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BranchNetwork",
    "DirectionalModel",
    "EvalReport",
    "NetworkConfig",
    "Record",
    "TrainConfig",
    "TrainingSet",
    "evaluate",
    "full_config",
    "tensor",
    "toy_config",
    "train_model",
    "vehicleid_split",
]
