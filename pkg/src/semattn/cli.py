"""Command-line entry points.

Configuration is flat `section.key=value` text; every key has a documented
default and unknown keys are rejected.  A config file (--config) is applied
first, then repeated --set overrides.  Exit codes: 0 success, 1 runtime or
validation failure, 2 usage.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    CONV_PLANS,
    FUSION_MECHANISMS,
    FusionConfig,
    ModelConfig,
    RgbBranchConfig,
    SemanticBranchConfig,
    canonical_mechanism,
)
from .data_pipeline import (
    DatasetManifest,
    load_manifest,
    restrict_semantic_classes,
)
from .errors import ConfigError, DependencyError, SemAttnError
from .evaluation import (
    compute_metrics,
    predict_records,
    write_metrics_json,
    write_predictions_jsonl,
)
from .ioutil import atomic_write_json
from .toy import ToySpec, generate
from .training import ArrayDataset, TrainConfig, train_stage

log = logging.getLogger("semattn")


# ---------------------------------------------------------------------------
# configuration schema


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(tok) for tok in text.split(",") if tok.strip()) if text else ()


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


# key -> (parser, default, help)
CONFIG_SCHEMA: dict[str, tuple] = {
    "data.root": (str, "", "dataset root (falls back to $SEMATTN_DATA_ROOT)"),
    "data.semantic_subset_size": (int, 0, "restrict to N semantic labels (0 = all)"),
    "data.semantic_subset_seed": (int, 0, "seed for the label subset"),
    "model.rgb_backbone": (str, "residual18", "residual18 | residual50 | tiny_residual"),
    "model.rgb_width_multiplier": (float, 1.0, "channel width scale for the RGB backbone"),
    "model.semantic_backbone": (str, "conv4", "conv4 | conv3 | resnet18_style"),
    "model.semantic_channel_plan": (_parse_int_list, (), "per-block channels (empty = default)"),
    "model.use_cham": (_parse_bool, True, "channel attention between semantic blocks"),
    "model.cham_ratio": (int, 0, "bottleneck reduction ratio (0 = auto)"),
    "fusion.mechanism": (str, "gated_rgb_hadamard", "|".join(FUSION_MECHANISMS) + " (aliases g_rgb_h, g_sem_h)"),
    "fusion.conv_plan": (str, "two_3x3", "|".join(CONV_PLANS)),
    "fusion.dropout": (float, 0.5, "classifier dropout probability"),
    "train.lr": (float, 0.1, "initial learning rate"),
    "train.momentum": (float, 0.9, "momentum coefficient"),
    "train.weight_decay": (float, 0.0001, "decay on conv/linear weights"),
    "train.batch_size": (int, 32, "mini-batch size"),
    "train.epochs": (int, 30, "epochs per stage"),
    "train.seed": (int, 0, "global seed"),
    "train.augment": (_parse_bool, True, "train-split augmentation"),
    "train.optimizer": (str, "sgd_momentum", "registered optimizer name"),
    "train.lr_decay_every": (int, 15, "epochs between decays (0 = constant lr)"),
    "train.lr_decay_factor": (float, 0.1, "multiplicative decay factor"),
    "train.cache_frozen_features": (_parse_bool, True, "cache branch outputs in fusion stage"),
    "eval.protocol": (str, "single", "single | ten_crop"),
    "eval.batch_size": (int, 16, "evaluation batch size"),
    "eval.split": (str, "val", "dataset split to evaluate"),
    "toy.scene_classes": (int, 4, "K"),
    "toy.semantic_classes": (int, 12, "L"),
    "toy.samples_per_class": (int, 16, "train samples per scene class"),
    "toy.val_samples_per_class": (int, 8, "val samples per scene class"),
    "toy.ambiguity": (float, 0.0, "fraction of shared-pool objects"),
    "toy.seed": (int, 0, "generation seed"),
    "toy.image_size": (int, 256, "square image edge"),
    "toy.corrupt_rate": (float, 0.0, "per-object label corruption rate"),
    "ablate.mechanisms": (_parse_str_list, ("additive", "concat", "hadamard", "g_rgb_h", "g_sem_h"), "mechanism axis rows"),
    "ablate.conv_plans": (_parse_str_list, CONV_PLANS, "fusion-depth axis rows"),
    "ablate.semantic_backbones": (_parse_str_list, ("conv4", "conv3"), "semantic-backbone axis rows"),
    "ablate.subset_sizes": (_parse_int_list, (4, 8, 12), "semantic-subset axis sizes"),
    "ablate.seeds": (_parse_int_list, (0,), "seeds averaged per ablation row"),
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, config_path: str | None, overrides: list[str]) -> "RunConfig":
        values = {k: default for k, (_, default, _) in CONFIG_SCHEMA.items()}
        pairs: list[tuple[str, str]] = []
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            for lineno, line in enumerate(path.read_text().splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                pairs.append((key.strip(), value.strip()))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            pairs.append((key.strip(), value.strip()))
        for key, raw in pairs:
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            parser = CONFIG_SCHEMA[key][0]
            try:
                values[key] = parser(raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        return cls(values)

    def data_root(self, flag_value: str | None) -> Path:
        root = flag_value or self["data.root"] or os.environ.get("SEMATTN_DATA_ROOT", "")
        if not root:
            raise ConfigError("no dataset root: pass --root, set data.root, or $SEMATTN_DATA_ROOT")
        return Path(root)

    def model_config(self, num_scene: int, num_semantic: int) -> ModelConfig:
        plan = self["model.semantic_channel_plan"] or None
        ratio = self["model.cham_ratio"] or None
        return ModelConfig(
            rgb=RgbBranchConfig(
                backbone=self["model.rgb_backbone"],
                width_multiplier=self["model.rgb_width_multiplier"],
            ),
            semantic=SemanticBranchConfig(
                backbone=self["model.semantic_backbone"],
                use_cham=self["model.use_cham"],
                channel_plan=plan,
                num_semantic_classes=num_semantic,
                cham_ratio=ratio,
            ),
            fusion=FusionConfig(
                mechanism=canonical_mechanism(self["fusion.mechanism"]),
                conv_plan=self["fusion.conv_plan"],
                dropout_p=self["fusion.dropout"],
                num_scene_classes=num_scene,
            ),
        )

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            learning_rate=self["train.lr"],
            momentum=self["train.momentum"],
            weight_decay=self["train.weight_decay"],
            batch_size=self["train.batch_size"],
            max_epochs=self["train.epochs"],
            optimizer=self["train.optimizer"],
            seed=self["train.seed"],
            augment=self["train.augment"],
            lr_decay_every=self["train.lr_decay_every"],
            lr_decay_factor=self["train.lr_decay_factor"],
            cache_frozen_features=self["train.cache_frozen_features"],
        )

    def toy_spec(self) -> ToySpec:
        return ToySpec(
            num_scene_classes=self["toy.scene_classes"],
            num_semantic_classes=self["toy.semantic_classes"],
            samples_per_class=self["toy.samples_per_class"],
            val_samples_per_class=self["toy.val_samples_per_class"],
            ambiguity=self["toy.ambiguity"],
            seed=self["toy.seed"],
            image_size=self["toy.image_size"],
            corrupt_rate=self["toy.corrupt_rate"],
        )


# ---------------------------------------------------------------------------
# shared helpers


def _manifests(cfg: RunConfig, root: Path) -> tuple[DatasetManifest, DatasetManifest]:
    train = load_manifest(root, "train")
    val = load_manifest(root, "val")
    size = cfg["data.semantic_subset_size"]
    if size:
        seed = cfg["data.semantic_subset_seed"]
        train = restrict_semantic_classes(train, size, seed)
        val = restrict_semantic_classes(val, size, seed)
    return train, val


STAGE_FLAG = {"rgb": "branch_rgb", "semantic": "branch_semantic", "fusion": "fusion"}


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the module a checkpoint describes; returns (model, input kind)."""
    from .checkpoint import load_state_into
    from .fusion import build_branch_model, build_model

    if ckpt.stage == "branch_rgb":
        model = build_branch_model(ckpt.model_config, "rgb")
        kind = "rgb"
    elif ckpt.stage == "branch_semantic":
        model = build_branch_model(ckpt.model_config, "semantic")
        kind = "semantic"
    else:
        model = build_model(ckpt.model_config)
        kind = "fused"
    load_state_into(model, ckpt.params)
    model.eval()
    return model, kind


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: RunConfig) -> int:
    root = cfg.data_root(args.root)
    spec = cfg.toy_spec()
    train, val = generate(spec, root)
    print(
        f"generated {len(train.samples)} train + {len(val.samples)} val samples "
        f"under {root}",
        file=sys.stderr,
    )
    return 0


def _run_training(cfg: RunConfig, root: Path, stage: str, args) -> Checkpoint:
    train_manifest, val_manifest = _manifests(cfg, root)
    model_cfg = cfg.model_config(
        train_manifest.num_scene_classes, train_manifest.num_semantic_classes
    )
    train_cfg = cfg.train_config(stage)
    rgb_ckpt = sem_ckpt = resume = None
    if stage == "fusion":
        if not args.rgb_checkpoint or not args.semantic_checkpoint:
            raise DependencyError(
                "fusion stage needs --rgb-checkpoint and --semantic-checkpoint"
            )
        rgb_ckpt = load_checkpoint(args.rgb_checkpoint)
        sem_ckpt = load_checkpoint(args.semantic_checkpoint)
    if args.resume:
        resume = load_checkpoint(args.resume)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return train_stage(
        model_cfg,
        train_cfg,
        train_manifest,
        val_manifest,
        rgb_checkpoint=rgb_ckpt,
        semantic_checkpoint=sem_ckpt,
        resume=resume,
        log_path=out_dir / "train_log.jsonl",
    )


def cmd_train(args, cfg: RunConfig) -> int:
    root = cfg.data_root(args.root)
    stage = STAGE_FLAG[args.stage]
    ckpt = _run_training(cfg, root, stage, args)
    out_dir = Path(args.out)
    ckpt_path = out_dir / f"{stage}.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    print(f"checkpoint written to {ckpt_path}", file=sys.stderr)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    root = cfg.data_root(args.root)
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(root, cfg["eval.split"])
    size = cfg["data.semantic_subset_size"]
    if size:
        manifest = restrict_semantic_classes(manifest, size, cfg["data.semantic_subset_seed"])
    model, kind = model_from_checkpoint(ckpt)
    dataset = ArrayDataset(manifest)
    protocol = args.protocol or cfg["eval.protocol"]
    records = predict_records(
        model, dataset.samples, kind=kind, protocol=protocol,
        batch_size=cfg["eval.batch_size"],
    )
    report = compute_metrics(records, manifest.num_scene_classes, protocol)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_json(report, out_dir / "metrics.json")
    write_predictions_jsonl(records, out_dir / "predictions.jsonl")
    print(
        f"top1={report.top1:.2f} top2={report.top2:.2f} top5={report.top5:.2f} "
        f"mca={report.mca:.2f} ({report.n_samples} samples, {protocol})",
        file=sys.stderr,
    )
    return 0


def _eval_model(model, kind, manifest, cfg: RunConfig):
    dataset = ArrayDataset(manifest)
    records = predict_records(
        model, dataset.samples, kind=kind, protocol="single",
        batch_size=cfg["eval.batch_size"],
    )
    return compute_metrics(records, manifest.num_scene_classes, "single")


def cmd_ablate(args, cfg: RunConfig) -> int:
    from . import ablation

    root = cfg.data_root(args.root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ablation.run_axis(args.axis, cfg, root, out_dir)
    atomic_write_json(out_dir / f"ablation_{args.axis}.json", rows)
    print(ablation.format_table(args.axis, rows))
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    from . import explain

    root = cfg.data_root(args.root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = _parse_str_list(args.sample_ids)
    explain.run(
        checkpoint_path=args.checkpoint,
        root=root,
        split=cfg["eval.split"],
        sample_ids=ids,
        pathway=args.pathway,
        out_dir=out_dir,
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semattn",
        description="Semantic-aware scene recognition toolkit",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--root", help="dataset root (default: config/data.root or $SEMATTN_DATA_ROOT)")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("generate", help="write a synthetic toy dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", required=True, choices=sorted(STAGE_FLAG))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rgb-checkpoint", help="stage-1 RGB checkpoint (fusion stage)")
    p.add_argument("--semantic-checkpoint", help="stage-1 semantic checkpoint (fusion stage)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=("single", "ten_crop"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation axis")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("mechanism", "fusion_depth", "semantic_backbone", "semantic_subset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="emit CAMs and an object-attention report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-ids", required=True, help="comma-separated sample ids")
    p.add_argument("--pathway", required=True, choices=("rgb", "semantic", "fused"))
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        return args.func(args, cfg)
    except SemAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
