"""Ablation axes: comparative tables over mechanisms, fusion depth,
semantic backbones, and semantic-label subsets."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data_pipeline import restrict_semantic_classes
from .semantic_branch import count_parameters
from .training import ArrayDataset, train_stage

log = logging.getLogger("semattn")


def _load_data(cfg, root):
    from .cli import _manifests

    return _manifests(cfg, root)


def _train_branches(cfg, model_cfg, train_m, val_m, datasets, seed):
    results = {}
    for stage in ("branch_rgb", "branch_semantic"):
        tc = replace(cfg.train_config(stage), seed=seed)
        results[stage] = train_stage(
            model_cfg, tc, train_m, val_m,
            train_dataset=datasets[0], val_dataset=datasets[1],
        )
    return results["branch_rgb"], results["branch_semantic"]


def _train_fusion(cfg, model_cfg, train_m, val_m, datasets, rgb_ckpt, sem_ckpt, seed):
    tc = replace(cfg.train_config("fusion"), seed=seed)
    return train_stage(
        model_cfg, tc, train_m, val_m,
        rgb_checkpoint=rgb_ckpt, semantic_checkpoint=sem_ckpt,
        train_dataset=datasets[0], val_dataset=datasets[1],
    )


def _eval_ckpt(cfg, ckpt, manifest, dataset):
    from .cli import model_from_checkpoint
    from .evaluation import compute_metrics, predict_records

    model, kind = model_from_checkpoint(ckpt)
    records = predict_records(
        model, dataset.samples, kind=kind, protocol="single",
        batch_size=cfg["eval.batch_size"],
    )
    report = compute_metrics(records, manifest.num_scene_classes, "single")
    return {
        "top1": report.top1,
        "top2": report.top2,
        "top5": report.top5,
        "mca": report.mca,
    }


def run_axis(axis: str, cfg, root: Path, out_dir: Path) -> list[dict]:
    train_m, val_m = _load_data(cfg, root)
    datasets = (ArrayDataset(train_m), ArrayDataset(val_m))
    seeds = list(cfg["ablate.seeds"])
    if axis == "mechanism":
        return _axis_mechanism(cfg, train_m, val_m, datasets, seeds)
    if axis == "fusion_depth":
        return _axis_fusion_depth(cfg, train_m, val_m, datasets, seeds)
    if axis == "semantic_backbone":
        return _axis_semantic_backbone(cfg, train_m, val_m, datasets, seeds)
    if axis == "semantic_subset":
        return _axis_semantic_subset(cfg, root, out_dir, seeds)
    raise ValueError(f"unknown ablation axis {axis!r}")


def _mean_rows(per_seed: list[dict]) -> dict:
    keys = ("top1", "top2", "top5", "mca")
    out = {k: float(np.mean([r[k] for r in per_seed])) for k in keys}
    out.update({f"{k}_std": float(np.std([r[k] for r in per_seed])) for k in keys})
    return out


def _axis_mechanism(cfg, train_m, val_m, datasets, seeds):
    rows = []
    baseline_rows, variant_rows = [], {m: [] for m in cfg["ablate.mechanisms"]}
    for seed in seeds:
        model_cfg = cfg.model_config(train_m.num_scene_classes, train_m.num_semantic_classes)
        rgb_ckpt, sem_ckpt = _train_branches(cfg, model_cfg, train_m, val_m, datasets, seed)
        baseline_rows.append(_eval_ckpt(cfg, rgb_ckpt, val_m, datasets[1]))
        for mech in cfg["ablate.mechanisms"]:
            mcfg = replace(model_cfg, fusion=replace(model_cfg.fusion, mechanism=_canon(mech)))
            ckpt = _train_fusion(cfg, mcfg, train_m, val_m, datasets, rgb_ckpt, sem_ckpt, seed)
            variant_rows[mech].append(_eval_ckpt(cfg, ckpt, val_m, datasets[1]))
    rows.append({"mechanism": "rgb_baseline", **_mean_rows(baseline_rows)})
    for mech, result in variant_rows.items():
        rows.append({"mechanism": _canon(mech), **_mean_rows(result)})
    return rows


def _canon(mech: str) -> str:
    from .config import canonical_mechanism

    return canonical_mechanism(mech)


def _axis_fusion_depth(cfg, train_m, val_m, datasets, seeds):
    plans = cfg["ablate.conv_plans"]
    collected = {p: [] for p in plans}
    for seed in seeds:
        model_cfg = cfg.model_config(train_m.num_scene_classes, train_m.num_semantic_classes)
        rgb_ckpt, sem_ckpt = _train_branches(cfg, model_cfg, train_m, val_m, datasets, seed)
        for plan in plans:
            pcfg = replace(model_cfg, fusion=replace(model_cfg.fusion, conv_plan=plan))
            ckpt = _train_fusion(cfg, pcfg, train_m, val_m, datasets, rgb_ckpt, sem_ckpt, seed)
            collected[plan].append(_eval_ckpt(cfg, ckpt, val_m, datasets[1]))
    return [{"conv_plan": p, **_mean_rows(v)} for p, v in collected.items()]


def _axis_semantic_backbone(cfg, train_m, val_m, datasets, seeds):
    rows = []
    for backbone in cfg["ablate.semantic_backbones"]:
        for use_cham in (False, True):
            per_seed = []
            params = None
            for seed in seeds:
                model_cfg = cfg.model_config(
                    train_m.num_scene_classes, train_m.num_semantic_classes
                )
                model_cfg = replace(
                    model_cfg,
                    semantic=replace(
                        model_cfg.semantic, backbone=backbone, use_cham=use_cham,
                        channel_plan=None,
                    ),
                )
                params = count_parameters(model_cfg.semantic)
                tc = replace(cfg.train_config("branch_semantic"), seed=seed)
                ckpt = train_stage(
                    model_cfg, tc, train_m, val_m,
                    train_dataset=datasets[0], val_dataset=datasets[1],
                )
                per_seed.append(_eval_ckpt(cfg, ckpt, val_m, datasets[1]))
            rows.append(
                {
                    "backbone": backbone,
                    "cham": use_cham,
                    "parameters": params,
                    **_mean_rows(per_seed),
                }
            )
    return rows


def _axis_semantic_subset(cfg, root, out_dir, seeds):
    from .cli import _manifests

    rows = []
    sizes = sorted(cfg["ablate.subset_sizes"])
    train_full, val_full = _manifests(cfg, root)
    full_datasets = (ArrayDataset(train_full), ArrayDataset(val_full))
    L = train_full.num_semantic_classes
    collected = {size: [] for size in sizes}
    for seed in seeds:
        model_cfg = cfg.model_config(train_full.num_scene_classes, L)
        rgb_ckpt, _ = _train_branches(cfg, model_cfg, train_full, val_full, full_datasets, seed)
        for size in sizes:
            if size == L:
                train_m, val_m, datasets = train_full, val_full, full_datasets
            else:
                train_m = restrict_semantic_classes(train_full, size, seed)
                val_m = restrict_semantic_classes(val_full, size, seed)
                datasets = (ArrayDataset(train_m), ArrayDataset(val_m))
            tc = replace(cfg.train_config("branch_semantic"), seed=seed)
            sem_ckpt = train_stage(
                model_cfg, tc, train_m, val_m,
                train_dataset=datasets[0], val_dataset=datasets[1],
            )
            fused = _train_fusion(cfg, model_cfg, train_m, val_m, datasets, rgb_ckpt, sem_ckpt, seed)
            collected[size].append(_eval_ckpt(cfg, fused, val_m, datasets[1]))
    for size in sizes:
        rows.append({"subset_size": size, **_mean_rows(collected[size])})
    _subset_chart(rows, out_dir / "ablation_semantic_subset.png")
    return rows


def _subset_chart(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = [r["subset_size"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(sizes))
    ax.bar(x - 0.2, [r["top1"] for r in rows], width=0.4,
           yerr=[r["top1_std"] for r in rows], label="Top@1", color="tab:blue")
    ax.bar(x + 0.2, [r["mca"] for r in rows], width=0.4,
           yerr=[r["mca_std"] for r in rows], label="MCA", color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels([str(s) for s in sizes])
    ax.set_xlabel("semantic classes kept")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    tmp = Path(path).with_suffix(".tmp.png")
    fig.savefig(tmp)
    plt.close(fig)
    Path(tmp).replace(path)


def format_table(axis: str, rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    keys = [k for k in rows[0] if not k.endswith("_std")]
    widths = {k: max(len(k), *(len(_fmt(r[k])) for r in rows)) for k in keys}
    header = "  ".join(k.ljust(widths[k]) for k in keys)
    sep = "  ".join("-" * widths[k] for k in keys)
    lines = [header, sep]
    for r in rows:
        lines.append("  ".join(_fmt(r[k]).ljust(widths[k]) for k in keys))
    return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)
