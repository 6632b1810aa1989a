"""Sparsified per-pixel semantic score tensors.

A segmentation network emits a dense per-pixel distribution over L labels.
To keep storage and the semantic branch input manageable only the three
strongest labels per pixel are retained; the surviving scores keep their
original values (no renormalization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

TOP_K = 3


@dataclass
class SemanticScoreTensor:
    """Top-3 sparsification of a dense h x w x L score tensor.

    labels[i, j, s] is the label index of slot s at pixel (i, j); scores are
    nonincreasing across the slots of a pixel.  When fewer than 3 labels are
    available (L < 3) the trailing slots carry zero scores.
    """

    labels: np.ndarray  # (h, w, 3) integer
    scores: np.ndarray  # (h, w, 3) float32
    num_classes: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        if self.labels.ndim != 3 or self.labels.shape[2] != TOP_K:
            raise ShapeError(f"labels must be (h, w, {TOP_K}), got {self.labels.shape}")
        if self.scores.shape != self.labels.shape:
            raise ShapeError(
                f"scores shape {self.scores.shape} != labels shape {self.labels.shape}"
            )
        if self.num_classes < 1:
            raise ShapeError("num_classes must be >= 1")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def validate(self) -> None:
        """Check the per-pixel invariants; raises FormatError on violation."""
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise FormatError("label index out of range [0, L)")
        if not np.isfinite(self.scores).all():
            raise FormatError("scores must be finite")
        if self.scores.min(initial=0.0) < 0.0:
            raise FormatError("scores must be nonnegative")
        if self.scores.max(initial=0.0) > 1.0 + 1e-6:
            raise FormatError("scores must be <= 1")
        if np.any(self.scores[..., :-1] < self.scores[..., 1:] - 1e-7):
            raise FormatError("scores must be nonincreasing across slots")
        # distinctness only matters for slots that carry mass; zero-score
        # padding may repeat a label when L < 3
        nz = self.scores > 0
        for a in range(TOP_K):
            for b in range(a + 1, TOP_K):
                clash = (self.labels[..., a] == self.labels[..., b]) & nz[..., a] & nz[..., b]
                if clash.any():
                    raise FormatError("duplicate label among nonzero slots")

    def copy(self) -> "SemanticScoreTensor":
        return SemanticScoreTensor(self.labels.copy(), self.scores.copy(), self.num_classes)

    def restricted(self, kept_labels) -> "SemanticScoreTensor":
        """Zero the scores of every label not in `kept_labels`."""
        keep = np.zeros(self.num_classes, dtype=bool)
        keep[np.asarray(list(kept_labels), dtype=np.int64)] = True
        out = self.copy()
        out.scores[~keep[out.labels]] = 0.0
        return out


def sparsify(dense: np.ndarray) -> SemanticScoreTensor:
    """Keep the 3 largest entries of each pixel's length-L score vector.

    Ties break toward the lower label index.  Survivors keep their original
    values.  For L < 3 every entry survives and the spare slots are padded
    with zero scores.
    """
    dense = np.asarray(dense)
    if dense.ndim != 3:
        raise ShapeError(f"dense tensor must be (h, w, L), got shape {dense.shape}")
    h, w, num_classes = dense.shape
    if np.any(dense < 0):
        raise ShapeError("dense scores must be nonnegative")

    k = min(TOP_K, num_classes)
    # stable sort on -value gives value-descending, label-ascending order
    order = np.argsort(-dense, axis=2, kind="stable")[..., :k]
    values = np.take_along_axis(dense, order, axis=2)

    labels = np.zeros((h, w, TOP_K), dtype=np.int64)
    scores = np.zeros((h, w, TOP_K), dtype=np.float32)
    labels[..., :k] = order
    scores[..., :k] = values
    # L < 3: pad slots repeat label 0 with zero score
    return SemanticScoreTensor(labels, scores, num_classes)


def densify(sparse: SemanticScoreTensor) -> np.ndarray:
    """Expand back to a dense (h, w, L) array with zeros off the kept slots."""
    if sparse.labels.max(initial=0) >= sparse.num_classes:
        raise FormatError("label index >= num_classes")
    if sparse.labels.min(initial=0) < 0:
        raise FormatError("negative label index")
    h, w, _ = sparse.labels.shape
    dense = np.zeros((h, w, sparse.num_classes), dtype=np.float32)
    rows, cols = np.mgrid[0:h, 0:w]
    # write slots weakest-first so that on a label collision (only possible
    # with zero-score padding) the strongest slot's value survives
    for s in reversed(range(TOP_K)):
        dense[rows, cols, sparse.labels[..., s]] = sparse.scores[..., s]
    return dense
