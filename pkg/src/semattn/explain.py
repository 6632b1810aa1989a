"""CAM emission and object-attention reporting for the explain command."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from .batching import model_inputs
from .checkpoint import load_checkpoint
from .data_pipeline import eval_transform, load_manifest, load_sample
from .errors import DependencyError
from .interpretability import (
    ObjectSceneCorrelation,
    accumulate_object_attention,
    compute_cam,
    emit_correlation_report,
    render_cam_overlay,
    render_correlation_chart,
    write_cam_binary,
    write_correlation_json,
)

log = logging.getLogger("semattn")

PATHWAY_STAGES = {
    "rgb": "branch_rgb",
    "semantic": "branch_semantic",
    "fused": "fusion",
}
PATHWAY_SOURCES = {
    "rgb": "rgb_branch",
    "semantic": "semantic_branch",
    "fused": "fused",
}


@torch.no_grad()
def cam_for_sample(model, kind: str, sample):
    """Pre-pool features -> CAM for the predicted class, plus log-probs."""
    from .fusion import BranchModel, SceneRecognitionModel

    inputs = model_inputs([sample], kind)
    if isinstance(model, BranchModel):
        features = model.branch(*inputs)
        log_probs = model.head(features)
        weights = model.head.classifier.weight
    elif isinstance(model, SceneRecognitionModel):
        f_i = model.rgb(inputs[0])
        f_m = model.semantic(inputs[1])
        features = model.fusion.fuse(
            model.fusion.adapt_rgb(f_i), model.fusion.adapt_semantic(f_m)
        )
        log_probs = model.fusion.classify(features)
        weights = model.fusion.classifier.weight
    else:
        raise TypeError(f"cannot explain model of type {type(model).__name__}")
    lp = log_probs[0].double().cpu().numpy()
    cam = compute_cam(
        features[0],
        weights,
        int(lp.argmax()),
        source=PATHWAY_SOURCES[kind],
        log_probs=lp,
    )
    return cam, lp


def run(checkpoint_path, root, split, sample_ids, pathway, out_dir) -> None:
    from .cli import model_from_checkpoint

    ckpt = load_checkpoint(checkpoint_path)
    expected = PATHWAY_STAGES[pathway]
    if ckpt.stage != expected:
        raise DependencyError(
            f"pathway {pathway!r} needs a {expected} checkpoint, got {ckpt.stage!r}"
        )
    model, kind = model_from_checkpoint(ckpt)
    manifest = load_manifest(root, split)
    by_id = {ref.id: ref for ref in manifest.samples}
    missing = [sid for sid in sample_ids if sid not in by_id]
    if missing:
        raise DependencyError(f"sample ids not in {split} split: {missing}")

    out_dir = Path(out_dir)
    accumulator = ObjectSceneCorrelation(manifest.num_semantic_classes)
    for sid in sample_ids:
        sample = eval_transform(load_sample(manifest, by_id[sid]))
        cam, _ = cam_for_sample(model, kind, sample)
        write_cam_binary(out_dir / f"cam_{sid}_{pathway}.cam", cam.values)
        render_cam_overlay(
            sample.image.pixels, cam.values, out_dir / f"cam_{sid}_{pathway}.png"
        )
        accumulate_object_attention(cam, sample.semantics, accumulator)
        log.info("CAM %s: predicted=%s top3=%s", sid, cam.predicted_class, cam.top3)

    names = manifest.semantic_class_names or [
        str(i) for i in range(manifest.num_semantic_classes)
    ]
    partition = {
        i: manifest.semantic_groups.get(name, "both") for i, name in enumerate(names)
    }
    rows = emit_correlation_report(accumulator, partition, names)
    write_correlation_json(rows, out_dir / "object_attention.json")
    render_correlation_chart(rows, out_dir / "object_attention.png")
