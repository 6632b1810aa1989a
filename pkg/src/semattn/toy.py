"""Synthetic paired RGB + semantics scene generator.

Each scene class is defined by a signature object label drawn in neutral
colors (informative to the semantic modality only) while objects from a
shared pool carry a class-dependent hue (informative to the RGB modality
only).  The `ambiguity` knob sets the probability that a placed object
comes from the shared pool, so the two modalities degrade in opposite
directions and fusing them is genuinely better than either branch alone.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data_pipeline import DatasetManifest, load_manifest, save_manifest
from .errors import ConfigError
from .ioutil import atomic_write_bytes
from .score_tensor import sparsify
from .sem_format import write_sem

BACKGROUND_LABEL = 0


@dataclass(frozen=True)
class ToySpec:
    num_scene_classes: int = 4
    num_semantic_classes: int = 12
    samples_per_class: int = 16
    val_samples_per_class: int = 8
    ambiguity: float = 0.0
    seed: int = 0
    image_size: int = 256
    corrupt_rate: float = 0.0  # per-object chance of a random wrong label
    objects_min: int = 2
    objects_max: int = 4

    def __post_init__(self):
        if self.num_scene_classes < 2:
            raise ConfigError("need at least 2 scene classes")
        if self.num_semantic_classes < self.num_scene_classes + 2:
            raise ConfigError(
                "need L >= K + 2 (background label plus a shared pool)"
            )
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError("ambiguity must be in [0, 1]")
        if not 0.0 <= self.corrupt_rate <= 1.0:
            raise ConfigError("corrupt_rate must be in [0, 1]")
        if self.image_size < 64:
            raise ConfigError("image_size too small to place objects")

    def unique_label(self, scene_class: int) -> int:
        return 1 + scene_class

    @property
    def shared_labels(self) -> range:
        return range(1 + self.num_scene_classes, self.num_semantic_classes)


def scene_class_names(spec: ToySpec) -> list[str]:
    return [f"scene_{k:02d}" for k in range(spec.num_scene_classes)]


def semantic_class_names(spec: ToySpec) -> list[str]:
    names = ["background"]
    names += [f"signature_{k:02d}" for k in range(spec.num_scene_classes)]
    names += [f"shared_{j:02d}" for j in range(len(spec.shared_labels))]
    return names


def semantic_groups(spec: ToySpec) -> dict[str, str]:
    """Arbitrary but deterministic indoor/outdoor/both partition."""
    groups = {}
    for i, name in enumerate(semantic_class_names(spec)):
        if name == "background":
            groups[name] = "both"
        else:
            groups[name] = ("indoor", "outdoor", "both")[i % 3]
    return groups


def _class_hue(scene_class: int, num_classes: int) -> float:
    return scene_class / num_classes


def _draw_object(image, label_map, rng, color, label):
    size = image.shape[0]
    half = int(rng.integers(12, size // 5))
    cy = int(rng.integers(half, size - half))
    cx = int(rng.integers(half, size - half))
    if rng.random() < 0.5:
        ys, xs = np.ogrid[:size, :size]
        mask = ((ys - cy) ** 2 + (xs - cx) ** 2) <= half**2
    else:
        mask = np.zeros((size, size), dtype=bool)
        mask[cy - half : cy + half, cx - half : cx + half] = True
    image[mask] = color
    label_map[mask] = label


def _render_sample(spec: ToySpec, scene_class: int, rng: np.random.Generator):
    size = spec.image_size
    base = 0.5 + rng.uniform(-0.06, 0.06)
    image = np.full((size, size, 3), base, dtype=np.float32)
    image += rng.normal(0.0, 0.03, size=(size, size, 3)).astype(np.float32)
    label_map = np.full((size, size), BACKGROUND_LABEL, dtype=np.int64)

    shared = list(spec.shared_labels)
    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(n_objects):
        if rng.random() < spec.ambiguity:
            # shared-pool object: label uninformative, hue carries the class
            label = int(rng.choice(shared))
            hue = (_class_hue(scene_class, spec.num_scene_classes) + rng.normal(0, 0.035)) % 1.0
            color = colorsys.hsv_to_rgb(
                hue, float(rng.uniform(0.75, 0.98)), float(rng.uniform(0.6, 0.95))
            )
        else:
            # signature object: label identifies the class, color is neutral
            label = spec.unique_label(scene_class)
            gray = float(rng.uniform(0.2, 0.8))
            color = tuple(np.clip(gray + rng.uniform(-0.02, 0.02, 3), 0, 1))
        painted = label
        if spec.corrupt_rate > 0 and rng.random() < spec.corrupt_rate:
            painted = int(rng.integers(0, spec.num_semantic_classes))
        _draw_object(image, label_map, rng, color, painted)

    image = np.clip(image, 0.0, 1.0)
    one_hot = np.zeros((size, size, spec.num_semantic_classes), dtype=np.float32)
    rows, cols = np.mgrid[0:size, 0:size]
    one_hot[rows, cols, label_map] = 1.0
    return image, sparsify(one_hot)


def _write_png(path: Path, pixels: np.ndarray) -> None:
    img = Image.fromarray((pixels * 255.0 + 0.5).astype(np.uint8))
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def generate(spec: ToySpec, root: str | Path) -> tuple[DatasetManifest, DatasetManifest]:
    """Write train and val splits plus manifest.json under `root`."""
    root = Path(root)
    scene_names = scene_class_names(spec)
    counts = {"train": spec.samples_per_class, "val": spec.val_samples_per_class}
    split_entries: dict[str, list[dict]] = {}
    for split_idx, (split, per_class) in enumerate(counts.items()):
        entries = []
        for k, cls_name in enumerate(scene_names):
            for i in range(per_class):
                rng = np.random.default_rng(
                    np.random.SeedSequence((spec.seed, split_idx, k, i))
                )
                image, sem = _render_sample(spec, k, rng)
                sample_id = f"{split}_{cls_name}_{i:03d}"
                base = root / split / cls_name / sample_id
                base.parent.mkdir(parents=True, exist_ok=True)
                _write_png(base.with_suffix(".png"), image)
                write_sem(base.with_suffix(".sem"), sem)
                entries.append({"id": sample_id, "scene": cls_name})
        split_entries[split] = entries
    save_manifest(
        root,
        scene_names,
        spec.num_semantic_classes,
        split_entries,
        semantic_class_names(spec),
        semantic_groups(spec),
    )
    return load_manifest(root, "train"), load_manifest(root, "val")


# ---------------------------------------------------------------------------
# sanity oracle over bags of semantic labels


def bag_of_labels(sem) -> set[int]:
    present = np.unique(sem.labels[sem.scores > 0])
    return {int(x) for x in present}


def semantic_bag_oracle(train_samples, val_samples) -> float:
    """Accuracy (%) of a rule-based classifier over label bags.

    Labels that co-occur with exactly one scene class in the training split
    vote for that class; a sample with no exclusive label falls back to the
    most frequent training class.
    """
    seen: dict[int, set[int]] = {}
    class_counts: dict[int, int] = {}
    for s in train_samples:
        class_counts[s.scene_label] = class_counts.get(s.scene_label, 0) + 1
        for label in bag_of_labels(s.semantics):
            seen.setdefault(label, set()).add(s.scene_label)
    fallback = min(
        class_counts, key=lambda c: (-class_counts[c], c)
    )
    correct = 0
    for s in val_samples:
        votes: dict[int, int] = {}
        for label in bag_of_labels(s.semantics):
            classes = seen.get(label)
            if classes is not None and len(classes) == 1:
                (cls,) = classes
                votes[cls] = votes.get(cls, 0) + 1
        if votes:
            pred = min(votes, key=lambda c: (-votes[c], c))
        else:
            pred = fallback
        correct += int(pred == s.scene_label)
    return 100.0 * correct / len(val_samples)
