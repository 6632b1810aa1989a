"""Conversion of decoded samples into model input tensors."""

from __future__ import annotations

import numpy as np
import torch

from .data_pipeline import Sample
from .score_tensor import TOP_K


def images_to_tensor(samples: list[Sample]) -> torch.Tensor:
    """(n, 3, h, w) float32 batch."""
    arr = np.stack([s.image.pixels for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def dense_semantics_tensor(
    labels: torch.Tensor, scores: torch.Tensor, num_classes: int
) -> torch.Tensor:
    """Scatter sparse (n, h, w, 3) slots into a dense (n, L, h, w) tensor.

    Slots are written weakest-first so a padding collision cannot clobber a
    real score (matches score_tensor.densify).
    """
    n, h, w, _ = labels.shape
    dense = torch.zeros(n, num_classes, h, w, dtype=scores.dtype)
    for s in reversed(range(TOP_K)):
        dense.scatter_(1, labels[..., s].unsqueeze(1), scores[..., s].unsqueeze(1))
    return dense


def semantics_to_tensor(samples: list[Sample]) -> torch.Tensor:
    num_classes = samples[0].semantics.num_classes
    labels = torch.from_numpy(np.stack([s.semantics.labels for s in samples]))
    scores = torch.from_numpy(np.stack([s.semantics.scores for s in samples]))
    return dense_semantics_tensor(labels, scores, num_classes)


def targets_to_tensor(samples: list[Sample]) -> torch.Tensor:
    return torch.tensor([s.scene_label for s in samples], dtype=torch.long)


def model_inputs(samples: list[Sample], kind: str) -> tuple[torch.Tensor, ...]:
    """kind: "rgb" -> (images,); "semantic" -> (dense,); "fused" -> both."""
    if kind == "rgb":
        return (images_to_tensor(samples),)
    if kind == "semantic":
        return (semantics_to_tensor(samples),)
    if kind == "fused":
        return (images_to_tensor(samples), semantics_to_tensor(samples))
    raise ValueError(f"unknown input kind {kind!r}")
