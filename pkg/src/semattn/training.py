"""Two-stage optimization.

Stage 1 trains each branch standalone under a temporary average-pool +
linear head.  Stage 2 loads both branch checkpoints, freezes them (verified
bit-for-bit at the end of the run), and trains the attention module and
final classifier from scratch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .batching import model_inputs
from .checkpoint import Checkpoint, load_state_into, model_state_to_numpy
from .config import ModelConfig
from .data_pipeline import (
    AugmentConfig,
    DatasetManifest,
    Sample,
    augment,
    eval_transform,
    load_all_samples,
    sample_rng,
)
from .errors import ConfigError, DependencyError, TrainingDiverged
from .evaluation import PredictionRecord, compute_metrics
from .fusion import SceneRecognitionModel, build_branch_model, build_model
from .ioutil import atomic_write_text

log = logging.getLogger("semattn")

STAGE_KINDS = {"branch_rgb": "rgb", "branch_semantic": "semantic", "fusion": "fused"}


@dataclass
class TrainConfig:
    stage: str = "fusion"
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 32
    max_epochs: int = 30
    optimizer: str = "sgd_momentum"
    seed: int = 0
    augment: bool = True
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    lr_decay_every: int = 15
    lr_decay_factor: float = 0.1
    cache_frozen_features: bool = True

    def __post_init__(self):
        if self.stage not in STAGE_KINDS:
            raise ConfigError(f"unknown training stage {self.stage!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def nll_loss(log_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log_prob at the target index."""
    if targets.min() < 0 or targets.max() >= log_probs.shape[1]:
        raise ValueError("targets out of range [0, K)")
    if not torch.isfinite(log_probs).all():
        bad = (~torch.isfinite(log_probs)).nonzero()[0].tolist()
        raise TrainingDiverged(f"non-finite log-probabilities (first at index {bad})")
    picked = log_probs.gather(1, targets.view(-1, 1)).squeeze(1)
    return -picked.mean()


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    velocity: torch.Tensor,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place update: v <- momentum*v + grad + wd*p ; p <- p - lr*v."""
    velocity.mul_(momentum).add_(grad).add_(param, alpha=weight_decay)
    param.add_(velocity, alpha=-lr)


class SgdMomentum:
    """Stochastic gradient with momentum and decoupled-by-name weight decay.

    Decay applies only to weight tensors of dim >= 2 (conv / linear weights);
    biases and normalization parameters are exempt.
    """

    def __init__(self, named_params, lr: float, momentum: float, weight_decay: float):
        self.named_params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.named_params:
            if p.grad is None:
                continue
            if name not in self.velocities:
                self.velocities[name] = torch.zeros_like(p)
            wd = self.weight_decay if p.dim() >= 2 else 0.0
            sgd_momentum_step(p, p.grad, self.velocities[name], self.lr, self.momentum, wd)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def state_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.cpu().numpy().copy() for k, v in self.velocities.items()}

    def load_state_numpy(self, state: dict[str, np.ndarray]) -> None:
        self.velocities = {k: torch.from_numpy(v.copy()) for k, v in state.items()}


OPTIMIZERS = {"sgd_momentum": SgdMomentum}


def register_optimizer(name: str, factory) -> None:
    """Extension point for alternative optimizers (e.g. Frank-Wolfe style)."""
    OPTIMIZERS[name] = factory


def make_optimizer(cfg: TrainConfig, named_params):
    if cfg.optimizer not in OPTIMIZERS:
        raise ConfigError(
            f"unknown optimizer {cfg.optimizer!r}; registered: {sorted(OPTIMIZERS)}"
        )
    return OPTIMIZERS[cfg.optimizer](
        named_params, cfg.learning_rate, cfg.momentum, cfg.weight_decay
    )


# ---------------------------------------------------------------------------
# in-memory dataset


class ArrayDataset:
    """All samples decoded up front; batches are assembled on demand."""

    def __init__(self, manifest: DatasetManifest, samples: list[Sample] | None = None):
        self.manifest = manifest
        self.samples = samples if samples is not None else load_all_samples(manifest)
        self._eval_cache: list[Sample] | None = None

    def __len__(self):
        return len(self.samples)

    def eval_samples(self) -> list[Sample]:
        if self._eval_cache is None:
            self._eval_cache = [eval_transform(s) for s in self.samples]
        return self._eval_cache

    def batch(
        self,
        indices,
        kind: str,
        augmented: bool,
        seed: int = 0,
        epoch: int = 0,
        augment_cfg: AugmentConfig = AugmentConfig(),
    ):
        if augmented:
            chunk = [
                augment(
                    self.samples[i],
                    sample_rng(seed, self.samples[i].id, epoch),
                    augment_cfg,
                )
                for i in indices
            ]
        else:
            cache = self.eval_samples()
            chunk = [cache[i] for i in indices]
        inputs = model_inputs(chunk, kind)
        targets = torch.tensor([s.scene_label for s in chunk], dtype=torch.long)
        return inputs, targets


# ---------------------------------------------------------------------------
# stage plumbing


def _branch_state(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    prefix = "branch."
    return {k[len(prefix):]: v for k, v in ckpt.params.items() if k.startswith(prefix)}


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _build_stage_model(
    model_cfg: ModelConfig,
    stage: str,
    rgb_checkpoint: Checkpoint | None,
    semantic_checkpoint: Checkpoint | None,
):
    if stage == "branch_rgb":
        return build_branch_model(model_cfg, "rgb")
    if stage == "branch_semantic":
        return build_branch_model(model_cfg, "semantic")
    if rgb_checkpoint is None or semantic_checkpoint is None:
        missing = [
            name
            for name, ck in (("rgb", rgb_checkpoint), ("semantic", semantic_checkpoint))
            if ck is None
        ]
        raise DependencyError(
            f"fusion stage requires both branch checkpoints; missing: {missing}"
        )
    if rgb_checkpoint.stage != "branch_rgb" or semantic_checkpoint.stage != "branch_semantic":
        raise DependencyError(
            f"expected stages (branch_rgb, branch_semantic), got "
            f"({rgb_checkpoint.stage}, {semantic_checkpoint.stage})"
        )
    # attention module and classifier start from fresh init; only branch
    # parameters come from the stage-1 checkpoints
    model = build_model(model_cfg)
    load_state_into(model.rgb, _branch_state(rgb_checkpoint))
    load_state_into(model.semantic, _branch_state(semantic_checkpoint))
    for p in model.branch_parameters():
        p.requires_grad_(False)
    return model


def _set_train_mode(model: torch.nn.Module, stage: str) -> None:
    if stage == "fusion":
        # frozen branches stay in eval mode so their statistics cannot drift
        model.eval()
        model.fusion.train()
    else:
        model.train()


def _trainable_named_params(model: torch.nn.Module, stage: str):
    if stage == "fusion":
        return [(f"fusion.{n}", p) for n, p in model.fusion.named_parameters()]
    return list(model.named_parameters())


class _EpochLog:
    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        self.lines: list[dict] = []

    def add(self, **entry) -> None:
        self.lines.append(entry)
        if self.path is not None:
            text = "\n".join(json.dumps(line, sort_keys=True) for line in self.lines)
            atomic_write_text(self.path, text + "\n")


@torch.no_grad()
def _cache_features(model: SceneRecognitionModel, dataset: ArrayDataset, batch_size: int):
    model.eval()
    feats_i, feats_m, targets = [], [], []
    samples = dataset.eval_samples()
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        image, dense = model_inputs(chunk, "fused")
        feats_i.append(model.rgb(image))
        feats_m.append(model.semantic(dense))
        targets.extend(s.scene_label for s in chunk)
    return torch.cat(feats_i), torch.cat(feats_m), torch.tensor(targets, dtype=torch.long)


def _epoch_metrics(records: list[PredictionRecord], num_classes: int):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = compute_metrics(records, num_classes)
    return report.top1, report.mca


def train_stage(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest | None = None,
    *,
    rgb_checkpoint: Checkpoint | None = None,
    semantic_checkpoint: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    log_path: str | Path | None = None,
    train_dataset: ArrayDataset | None = None,
    val_dataset: ArrayDataset | None = None,
) -> Checkpoint:
    """Run one training stage to completion and return its checkpoint."""
    stage = train_cfg.stage
    kind = STAGE_KINDS[stage]
    torch.manual_seed(train_cfg.seed)

    model = _build_stage_model(model_cfg, stage, rgb_checkpoint, semantic_checkpoint)
    optimizer = make_optimizer(train_cfg, _trainable_named_params(model, stage))
    start_epoch = 0
    if resume is not None:
        if resume.stage != stage:
            raise DependencyError(
                f"resume checkpoint is for stage {resume.stage!r}, not {stage!r}"
            )
        load_state_into(model, resume.params)
        optimizer.load_state_numpy(resume.optimizer_velocities)
        if resume.torch_rng is not None:
            torch.set_rng_state(torch.from_numpy(resume.torch_rng.copy()))
        start_epoch = resume.epoch + 1

    frozen_hash = None
    if stage == "fusion":
        frozen_hash = (state_hash(model.rgb), state_hash(model.semantic))

    dataset = train_dataset or ArrayDataset(train_manifest)
    valset = val_dataset or (ArrayDataset(val_manifest) if val_manifest else None)
    num_classes = model_cfg.fusion.num_scene_classes
    logger = _EpochLog(log_path)

    use_cache = (
        stage == "fusion" and not train_cfg.augment and train_cfg.cache_frozen_features
    )
    if use_cache:
        cached = _cache_features(model, dataset, train_cfg.batch_size)
        cached_val = _cache_features(model, valset, train_cfg.batch_size) if valset else None

    n = len(dataset)
    for epoch in range(start_epoch, train_cfg.max_epochs):
        t0 = time.monotonic()
        lr = train_cfg.lr_at(epoch)
        optimizer.lr = lr
        _set_train_mode(model, stage)
        order = torch.randperm(n).tolist()
        total_loss = 0.0
        train_records: list[PredictionRecord] = []
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            ids = [dataset.samples[j].id for j in idx]
            if use_cache:
                f_i, f_m, all_targets = cached
                sel = torch.tensor(idx, dtype=torch.long)
                log_probs = model.fusion(f_i[sel], f_m[sel])
                targets = all_targets[sel]
            else:
                inputs, targets = dataset.batch(
                    idx,
                    kind,
                    augmented=train_cfg.augment,
                    seed=train_cfg.seed,
                    epoch=epoch,
                    augment_cfg=train_cfg.augment_config,
                )
                log_probs = model(*inputs)
            loss = nll_loss(log_probs, targets)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach()) * len(idx)
            lp = log_probs.detach().double().cpu().numpy()
            train_records.extend(
                PredictionRecord(sid, row, int(t))
                for sid, row, t in zip(ids, lp, targets.tolist())
            )
        train_loss = total_loss / n
        top1, mca = _epoch_metrics(train_records, num_classes)
        logger.add(
            epoch=epoch,
            split="train",
            loss=round(train_loss, 6),
            top1=round(top1, 4),
            mca=round(mca, 4),
            lr=lr,
            wall_time_s=round(time.monotonic() - t0, 3),
        )
        log.info("stage=%s epoch=%d loss=%.4f top1=%.2f", stage, epoch, train_loss, top1)

        if valset is not None:
            t1 = time.monotonic()
            model.eval()
            val_records, val_loss = _validate(
                model, stage, valset, train_cfg.batch_size,
                cached_val if use_cache else None,
            )
            vtop1, vmca = _epoch_metrics(val_records, num_classes)
            logger.add(
                epoch=epoch,
                split="val",
                loss=round(val_loss, 6),
                top1=round(vtop1, 4),
                mca=round(vmca, 4),
                lr=lr,
                wall_time_s=round(time.monotonic() - t1, 3),
            )

    if stage == "fusion":
        post = (state_hash(model.rgb), state_hash(model.semantic))
        if post != frozen_hash:
            raise TrainingDiverged(
                "frozen branch parameters changed during fusion training"
            )

    model.eval()
    return Checkpoint(
        model_config=model_cfg,
        stage=stage,
        epoch=train_cfg.max_epochs - 1,
        params=model_state_to_numpy(model),
        optimizer_hyper={
            "name": train_cfg.optimizer,
            "lr": optimizer.lr,
            "momentum": train_cfg.momentum,
            "weight_decay": train_cfg.weight_decay,
        },
        optimizer_velocities=optimizer.state_numpy(),
        torch_rng=torch.get_rng_state().numpy().copy(),
        numpy_rng={"seed": train_cfg.seed},
    )


@torch.no_grad()
def _validate(model, stage, valset: ArrayDataset, batch_size: int, cached_val):
    records: list[PredictionRecord] = []
    total_loss = 0.0
    n = len(valset)
    kind = STAGE_KINDS[stage]
    if cached_val is not None:
        f_i, f_m, targets = cached_val
        for i in range(0, n, batch_size):
            sel = slice(i, min(i + batch_size, n))
            log_probs = model.fusion(f_i[sel], f_m[sel])
            total_loss += float(nll_loss(log_probs, targets[sel])) * (sel.stop - i)
            lp = log_probs.double().cpu().numpy()
            for j, row in zip(range(i, sel.stop), lp):
                records.append(
                    PredictionRecord(valset.samples[j].id, row, int(targets[j]))
                )
        return records, total_loss / n
    samples = valset.eval_samples()
    for i in range(0, n, batch_size):
        chunk = samples[i : i + batch_size]
        inputs = model_inputs(chunk, kind)
        targets = torch.tensor([s.scene_label for s in chunk], dtype=torch.long)
        log_probs = model(*inputs)
        total_loss += float(nll_loss(log_probs, targets)) * len(chunk)
        lp = log_probs.double().cpu().numpy()
        records.extend(
            PredictionRecord(s.id, row, s.scene_label) for s, row in zip(chunk, lp)
        )
    return records, total_loss / n
