"""Semantic-aware scene recognition: two-branch CNN with gated attention fusion."""

from .config import (
    FusionConfig,
    ModelConfig,
    RgbBranchConfig,
    SemanticBranchConfig,
)
from .data_pipeline import DatasetManifest, RgbImage, Sample
from .score_tensor import SemanticScoreTensor, densify, sparsify

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "FusionConfig",
    "ModelConfig",
    "RgbBranchConfig",
    "RgbImage",
    "Sample",
    "SemanticBranchConfig",
    "SemanticScoreTensor",
    "densify",
    "sparsify",
    "__version__",
]
