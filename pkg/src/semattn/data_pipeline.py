"""Image/semantics ingestion, augmentation, and the ten-crop protocol.

RGB images and their precomputed semantic score tensors move through this
module as paired numpy structures.  Geometric transforms (resize targeting,
crops, flips) are applied with identical parameters to both modalities;
photometric noise touches only the RGB side.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, ShapeError
from .ioutil import atomic_write_json
from .score_tensor import SemanticScoreTensor
from .sem_format import read_sem

RESIZE_EDGE = 256
CROP_SIZE = 224


# ---------------------------------------------------------------------------
# domain types


@dataclass
class RgbImage:
    """Normalized RGB image: (h, w, 3) float32 values in [0, 1]."""

    pixels: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"RGB image must be (h, w, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ShapeError("zero-area image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self) -> None:
        if not np.isfinite(self.pixels).all():
            raise FormatError("non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise FormatError("pixel values outside [0, 1]")


@dataclass
class Sample:
    image: RgbImage
    semantics: SemanticScoreTensor
    scene_label: int
    id: str

    def __post_init__(self):
        if (self.image.height, self.image.width) != (
            self.semantics.height,
            self.semantics.width,
        ):
            raise ShapeError(
                f"sample {self.id}: image {self.image.pixels.shape[:2]} vs "
                f"semantics {(self.semantics.height, self.semantics.width)}"
            )


@dataclass(frozen=True)
class SampleRef:
    id: str
    scene_label: int
    image_path: Path
    sem_path: Path


@dataclass
class DatasetManifest:
    root: Path
    split: str
    samples: list[SampleRef]
    num_scene_classes: int
    num_semantic_classes: int
    scene_class_names: list[str]
    semantic_class_names: list[str] = field(default_factory=list)
    semantic_groups: dict[str, str] = field(default_factory=dict)
    semantic_subset: tuple[int, ...] | None = None  # labels kept; None = all

    def __post_init__(self):
        if self.num_scene_classes < 2:
            raise FormatError("manifest needs at least 2 scene classes")
        for ref in self.samples:
            if not 0 <= ref.scene_label < self.num_scene_classes:
                raise FormatError(f"sample {ref.id}: scene label out of range")


# ---------------------------------------------------------------------------
# geometric transforms


def _bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample (pixel-center alignment, edges clamped)."""
    in_h, in_w = pixels.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    p = pixels.astype(np.float64)
    top = p[y0][:, x0] * (1 - wx) + p[y0][:, x1] * wx
    bot = p[y1][:, x0] * (1 - wx) + p[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def _nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * in_size / out_size
    return np.clip(np.floor(centers), 0, in_size - 1).astype(np.int64)


def _resize_target(h: int, w: int, edge: int = RESIZE_EDGE) -> tuple[int, int]:
    """Output dims with the smaller edge scaled to `edge` (aspect kept)."""
    if h <= w:
        return edge, max(1, round(w * edge / h))
    return max(1, round(h * edge / w)), edge


def resize_smaller_edge(image: RgbImage, edge: int = RESIZE_EDGE) -> RgbImage:
    out_h, out_w = _resize_target(image.height, image.width, edge)
    if (out_h, out_w) == (image.height, image.width):
        return image
    return RgbImage(_bilinear_resize(image.pixels, out_h, out_w), image.source_path)


def resize_semantics(sem: SemanticScoreTensor, out_h: int, out_w: int) -> SemanticScoreTensor:
    """Nearest-neighbor resample; keeps the sparsity structure intact."""
    if (out_h, out_w) == (sem.height, sem.width):
        return sem
    rows = _nearest_indices(out_h, sem.height)
    cols = _nearest_indices(out_w, sem.width)
    return SemanticScoreTensor(
        sem.labels[rows][:, cols], sem.scores[rows][:, cols], sem.num_classes
    )


def _crop(arr: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return arr[top : top + size, left : left + size]


def resize_and_crop(
    image: RgbImage,
    mode: str,
    rng: np.random.Generator | None = None,
    size: int = CROP_SIZE,
) -> RgbImage:
    """Scale the smaller edge to 256 then take a 224 square crop.

    mode "train_random" crops at a uniformly random valid offset (requires
    rng); "eval_center" crops at the center.
    """
    resized = resize_smaller_edge(image)
    top, left = crop_offsets(resized.height, resized.width, mode, rng, size)
    return RgbImage(_crop(resized.pixels, top, left, size).copy(), image.source_path)


def crop_offsets(
    h: int,
    w: int,
    mode: str,
    rng: np.random.Generator | None = None,
    size: int = CROP_SIZE,
) -> tuple[int, int]:
    if h < size or w < size:
        raise ShapeError(f"cannot crop {size} from {h}x{w}")
    if mode == "eval_center":
        return (h - size) // 2, (w - size) // 2
    if mode == "train_random":
        if rng is None:
            raise ConfigError("train_random crop requires an rng")
        return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    raise ConfigError(f"unknown crop mode {mode!r}")


def hflip_image(image: RgbImage) -> RgbImage:
    return RgbImage(image.pixels[:, ::-1].copy(), image.source_path)


def hflip_semantics(sem: SemanticScoreTensor) -> SemanticScoreTensor:
    return SemanticScoreTensor(
        sem.labels[:, ::-1].copy(), sem.scores[:, ::-1].copy(), sem.num_classes
    )


def eval_transform(sample: Sample, size: int = CROP_SIZE) -> Sample:
    """Deterministic resize + center crop applied to both modalities."""
    image = resize_smaller_edge(sample.image)
    sem = resize_semantics(sample.semantics, image.height, image.width)
    top, left = crop_offsets(image.height, image.width, "eval_center", size=size)
    return Sample(
        RgbImage(_crop(image.pixels, top, left, size).copy(), image.source_path),
        SemanticScoreTensor(
            _crop(sem.labels, top, left, size).copy(),
            _crop(sem.scores, top, left, size).copy(),
            sem.num_classes,
        ),
        sample.scene_label,
        sample.id,
    )


# ---------------------------------------------------------------------------
# photometric augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric knobs; each op fires independently with `op_probability`."""

    op_probability: float = 0.5
    blur_sigma_max: float = 1.5
    noise_sigma: float = 0.02
    brightness_delta: float = 0.15
    contrast_percentiles: tuple[float, float] = (2.0, 98.0)
    flip_probability: float = 0.5


def _gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return pixels
    radius = max(1, int(np.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(pixels, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(pixels, dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * padded[i : i + pixels.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(pixels, dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + pixels.shape[1]]
    return out.astype(np.float32)


def _contrast_stretch(pixels: np.ndarray, lo_pct: float, hi_pct: float) -> np.ndarray:
    lo, hi = np.percentile(pixels, [lo_pct, hi_pct])
    if hi - lo < 1e-6:
        return pixels
    return np.clip((pixels - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def augment(
    sample: Sample,
    rng_seed: int | np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
    size: int = CROP_SIZE,
) -> Sample:
    """Train-time augmentation.

    Both modalities get the same random crop and horizontal-flip decision;
    blur / contrast / noise / brightness apply to the RGB pixels only.
    """
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )

    image = resize_smaller_edge(sample.image)
    sem = resize_semantics(sample.semantics, image.height, image.width)
    top, left = crop_offsets(image.height, image.width, "train_random", rng, size)
    pixels = _crop(image.pixels, top, left, size).copy()
    labels = _crop(sem.labels, top, left, size).copy()
    scores = _crop(sem.scores, top, left, size).copy()

    if rng.random() < cfg.flip_probability:
        pixels = pixels[:, ::-1].copy()
        labels = labels[:, ::-1].copy()
        scores = scores[:, ::-1].copy()

    if rng.random() < cfg.op_probability:
        pixels = _gaussian_blur(pixels, float(rng.uniform(0.0, cfg.blur_sigma_max)))
    if rng.random() < cfg.op_probability:
        pixels = _contrast_stretch(pixels, *cfg.contrast_percentiles)
    if rng.random() < cfg.op_probability:
        pixels = pixels + rng.normal(0.0, cfg.noise_sigma, size=pixels.shape)
    if rng.random() < cfg.op_probability:
        pixels = pixels + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)

    return Sample(
        RgbImage(pixels, sample.image.source_path),
        SemanticScoreTensor(labels, scores, sem.num_classes),
        sample.scene_label,
        sample.id,
    )


def sample_rng(global_seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Independent per-sample stream derived from (seed, sample id, epoch)."""
    key = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((global_seed, epoch, key)))


# ---------------------------------------------------------------------------
# ten-crop protocol


def ten_crop_offsets(h: int, w: int, size: int = CROP_SIZE) -> list[tuple[int, int]]:
    if h < size or w < size:
        raise ShapeError(f"cannot ten-crop {size} from {h}x{w}")
    return [
        (0, 0),
        (0, w - size),
        (h - size, 0),
        (h - size, w - size),
        ((h - size) // 2, (w - size) // 2),
    ]


def ten_crop(image: RgbImage, size: int = CROP_SIZE) -> list[RgbImage]:
    """Four corner crops + center crop, then the horizontal mirror of each.

    Order: [TL, TR, BL, BR, C, mirror(TL), mirror(TR), mirror(BL),
    mirror(BR), mirror(C)].  The smaller edge is resized to 256 first.
    """
    resized = resize_smaller_edge(image)
    crops = [
        RgbImage(_crop(resized.pixels, t, l, size).copy(), image.source_path)
        for t, l in ten_crop_offsets(resized.height, resized.width, size)
    ]
    return crops + [hflip_image(c) for c in crops]


def ten_crop_sample(sample: Sample, size: int = CROP_SIZE) -> list[Sample]:
    """Ten-crop with identical crop geometry applied to the semantics."""
    image = resize_smaller_edge(sample.image)
    sem = resize_semantics(sample.semantics, image.height, image.width)
    offsets = ten_crop_offsets(image.height, image.width, size)
    crops = []
    for t, l in offsets:
        crops.append(
            Sample(
                RgbImage(_crop(image.pixels, t, l, size).copy(), image.source_path),
                SemanticScoreTensor(
                    _crop(sem.labels, t, l, size).copy(),
                    _crop(sem.scores, t, l, size).copy(),
                    sem.num_classes,
                ),
                sample.scene_label,
                sample.id,
            )
        )
    mirrored = [
        Sample(
            hflip_image(c.image), hflip_semantics(c.semantics), c.scene_label, c.id
        )
        for c in crops
    ]
    return crops + mirrored


# ---------------------------------------------------------------------------
# dataset layout: <root>/<split>/<class_name>/<id>.png + <id>.sem


def save_manifest(
    root: str | Path,
    scene_class_names: list[str],
    num_semantic_classes: int,
    split_entries: dict[str, list[dict]],
    semantic_class_names: list[str] | None = None,
    semantic_groups: dict[str, str] | None = None,
) -> Path:
    root = Path(root)
    doc = {
        "scene_classes": list(scene_class_names),
        "num_semantic_classes": int(num_semantic_classes),
        "splits": split_entries,
    }
    if semantic_class_names:
        doc["semantic_classes"] = list(semantic_class_names)
    if semantic_groups:
        doc["semantic_groups"] = dict(semantic_groups)
    path = root / "manifest.json"
    atomic_write_json(path, doc)
    return path


def load_manifest(root: str | Path, split: str) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json under {root}")
    doc = json.loads(path.read_text())
    if split not in doc.get("splits", {}):
        raise FormatError(f"split {split!r} not in manifest (has {list(doc['splits'])})")
    names = doc["scene_classes"]
    name_to_label = {n: i for i, n in enumerate(names)}
    refs = []
    for entry in doc["splits"][split]:
        cls = entry["scene"]
        if cls not in name_to_label:
            raise FormatError(f"unknown scene class {cls!r} in manifest")
        base = root / split / cls / entry["id"]
        refs.append(
            SampleRef(
                id=entry["id"],
                scene_label=name_to_label[cls],
                image_path=base.with_suffix(".png"),
                sem_path=base.with_suffix(".sem"),
            )
        )
    return DatasetManifest(
        root=root,
        split=split,
        samples=refs,
        num_scene_classes=len(names),
        num_semantic_classes=int(doc["num_semantic_classes"]),
        scene_class_names=list(names),
        semantic_class_names=list(doc.get("semantic_classes", [])),
        semantic_groups=dict(doc.get("semantic_groups", {})),
    )


def load_image(path: str | Path) -> RgbImage:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return RgbImage(arr, str(path))


def load_sample(manifest: DatasetManifest, ref: SampleRef) -> Sample:
    image = load_image(ref.image_path)
    sem = read_sem(ref.sem_path)
    if sem.num_classes != manifest.num_semantic_classes:
        raise FormatError(
            f"{ref.sem_path}: L={sem.num_classes} but manifest says "
            f"{manifest.num_semantic_classes}"
        )
    if manifest.semantic_subset is not None:
        sem = sem.restricted(manifest.semantic_subset)
    return Sample(image, sem, ref.scene_label, ref.id)


def load_all_samples(manifest: DatasetManifest) -> list[Sample]:
    return [load_sample(manifest, ref) for ref in manifest.samples]


def restrict_semantic_classes(
    manifest: DatasetManifest, subset_size: int, seed: int
) -> DatasetManifest:
    """Keep a seeded random subset of semantic labels; zero the rest.

    Subsets are incremental across sizes: for a fixed seed, the size-m
    subset is a prefix of the size-n subset whenever m <= n.
    """
    L = manifest.num_semantic_classes
    if not 1 <= subset_size <= L:
        raise ValueError(f"subset_size must be in [1, {L}], got {subset_size}")
    permutation = np.random.default_rng(seed).permutation(L)
    kept = tuple(sorted(int(x) for x in permutation[:subset_size]))
    return replace(manifest, semantic_subset=kept)
