"""Adaptive hard-negative perturbation learning for dual encoders, at desk scale."""

from ahnpl.embedding import cosine_similarity, l2_normalize, similarity_matrix
from ahnpl.estimator import AHNPLDualEncoder
from ahnpl.losses import BatchTensors, LossBreakdown, MarginState, total_loss
from ahnpl.trainer import PRESETS, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AHNPLDualEncoder",
    "BatchTensors",
    "LossBreakdown",
    "MarginState",
    "PRESETS",
    "TrainConfig",
    "cosine_similarity",
    "l2_normalize",
    "similarity_matrix",
    "total_loss",
    "train",
]
