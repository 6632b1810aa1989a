"""Class activation maps and dataset-level object-attention accumulation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, ShapeError
from .ioutil import atomic_write_bytes, atomic_write_json
from .score_tensor import SemanticScoreTensor

CAM_MAGIC = b"CAM1"
_CAM_HEADER = struct.Struct("<4sIII")

PATHWAYS = ("rgb_branch", "semantic_branch", "fused")
GROUPS = ("indoor", "outdoor", "both")


@dataclass
class ActivationMap:
    values: np.ndarray  # (h, w) in [0, 1]
    source: str
    predicted_class: int
    top3: tuple = ()  # (label, log_prob) pairs, best first

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError("activation map must be 2-D")
        if self.source not in PATHWAYS:
            raise ValueError(f"unknown pathway {self.source!r}")


@dataclass
class ObjectSceneCorrelation:
    """Per-semantic-label attention accumulated over samples."""

    num_labels: int
    attention: np.ndarray = field(default=None)
    sample_count: int = 0

    def __post_init__(self):
        if self.attention is None:
            self.attention = np.zeros(self.num_labels, dtype=np.float64)

    def merge(self, other: "ObjectSceneCorrelation") -> "ObjectSceneCorrelation":
        if other.num_labels != self.num_labels:
            raise ShapeError("cannot merge accumulators over different label spaces")
        self.attention += other.attention
        self.sample_count += other.sample_count
        return self


def cam_weighted_sum(features: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """Channel-weighted sum of feature maps: (c, h, w) x (c,) -> (h, w)."""
    features = np.asarray(features, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if features.ndim != 3 or class_weights.ndim != 1:
        raise ShapeError("expected (c, h, w) features and (c,) weights")
    if features.shape[0] != class_weights.shape[0]:
        raise ShapeError(
            f"{features.shape[0]} channels vs {class_weights.shape[0]} weights"
        )
    return np.tensordot(class_weights, features, axes=1)


def normalize_cam(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map collapses to all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo < 1e-12:
        return np.zeros_like(values, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def compute_cam(
    features,
    classifier_weights,
    class_index: int,
    *,
    source: str = "fused",
    output_size: int = 224,
    log_probs: np.ndarray | None = None,
) -> ActivationMap:
    """CAM for one class: weight the pre-pool features by that class's
    classifier row, bilinearly upsample, then min-max normalize.
    """
    features = np.asarray(
        features.detach().cpu() if isinstance(features, torch.Tensor) else features
    )
    weights = np.asarray(
        classifier_weights.detach().cpu()
        if isinstance(classifier_weights, torch.Tensor)
        else classifier_weights
    )
    if weights.ndim != 2:
        raise ShapeError("classifier weights must be (K, c)")
    if not 0 <= class_index < weights.shape[0]:
        raise ValueError(f"class index {class_index} out of range [0, {weights.shape[0]})")
    raw = cam_weighted_sum(features, weights[class_index])
    up = F.interpolate(
        torch.from_numpy(raw[None, None]).float(),
        size=(output_size, output_size),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    top3: tuple = ()
    predicted = class_index
    if log_probs is not None:
        order = np.argsort(-np.asarray(log_probs), kind="stable")[:3]
        top3 = tuple((int(i), float(log_probs[i])) for i in order)
        predicted = int(order[0])
    return ActivationMap(normalize_cam(up), source, predicted, top3)


def accumulate_object_attention(
    cam: ActivationMap | np.ndarray,
    semantics: SemanticScoreTensor,
    accumulator: ObjectSceneCorrelation,
) -> ObjectSceneCorrelation:
    """Add each pixel's CAM value to the bin of its top-1 semantic label."""
    values = cam.values if isinstance(cam, ActivationMap) else np.asarray(cam)
    if values.shape != (semantics.height, semantics.width):
        raise ShapeError(
            f"CAM {values.shape} vs semantics {(semantics.height, semantics.width)}"
        )
    if semantics.num_classes != accumulator.num_labels:
        raise ShapeError("accumulator label space does not match semantics")
    top1 = semantics.labels[..., 0]
    accumulator.attention += np.bincount(
        top1.ravel(), weights=values.ravel().astype(np.float64),
        minlength=accumulator.num_labels,
    )
    accumulator.sample_count += 1
    return accumulator


def emit_correlation_report(
    accumulator: ObjectSceneCorrelation,
    partition: dict[int, str] | list[str],
    label_names: list[str] | None = None,
) -> list[dict]:
    """Ranked label/weight rows (weights normalized to sum 1), group-tagged."""
    total = float(accumulator.attention.sum())
    if accumulator.sample_count == 0 or total <= 0.0:
        raise ValueError("empty accumulation")
    if isinstance(partition, list):
        partition = dict(enumerate(partition))
    rows = []
    for label in np.argsort(-accumulator.attention, kind="stable"):
        label = int(label)
        group = partition.get(label, "both")
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r} for label {label}")
        rows.append(
            {
                "label": label,
                "label_name": label_names[label] if label_names else str(label),
                "group": group,
                "weight": float(accumulator.attention[label] / total),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# artifacts


def write_cam_binary(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ShapeError("CAM grid must be 2-D")
    h, w = values.shape
    atomic_write_bytes(path, _CAM_HEADER.pack(CAM_MAGIC, h, w, 0) + values.tobytes())


def read_cam_binary(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _CAM_HEADER.size:
        raise FormatError(f"{path}: truncated CAM header")
    magic, h, w, _reserved = _CAM_HEADER.unpack_from(data)
    if magic != CAM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _CAM_HEADER.size + 4 * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=_CAM_HEADER.size).reshape(h, w).copy()


def render_cam_overlay(image_pixels: np.ndarray, cam: np.ndarray, path: str | Path) -> None:
    """Blend a jet-colormapped CAM over the RGB image and write a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    from PIL import Image

    heat = matplotlib.colormaps["jet"](np.asarray(cam, dtype=np.float64))[..., :3]
    blend = 0.5 * np.asarray(image_pixels, dtype=np.float64) + 0.5 * heat
    img = Image.fromarray((np.clip(blend, 0, 1) * 255).astype(np.uint8))
    tmp = Path(path).with_suffix(".tmp.png")
    img.save(tmp, format="PNG")
    tmp.replace(path)


_GROUP_COLORS = {"indoor": "purple", "outdoor": "green", "both": "black"}


def render_correlation_chart(rows: list[dict], path: str | Path, top_n: int = 30) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = rows[:top_n]
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(rows)), 4))
    ax.bar(
        range(len(rows)),
        [r["weight"] for r in rows],
        color=[_GROUP_COLORS[r["group"]] for r in rows],
    )
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["label_name"] for r in rows], rotation=90, fontsize=7)
    ax.set_ylabel("normalized attention")
    fig.tight_layout()
    tmp = Path(path).with_suffix(".tmp.png")
    fig.savefig(tmp)
    plt.close(fig)
    Path(tmp).replace(path)


def write_correlation_json(rows: list[dict], path: str | Path) -> None:
    atomic_write_json(path, rows)
