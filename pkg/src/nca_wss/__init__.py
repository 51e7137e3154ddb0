"""Weakly supervised cell segmentation from a neural cellular automaton classifier."""

__version__ = "0.1.0"

from .config import TrainConfig
from .estimator import NCAClassifier, NCAMaskExtractor
from .model import NcaParams, forward, init_params, rollout
from .segment import extract_mask

__all__ = [
    "NCAClassifier",
    "NCAMaskExtractor",
    "NcaParams",
    "TrainConfig",
    "extract_mask",
    "forward",
    "init_params",
    "rollout",
]
