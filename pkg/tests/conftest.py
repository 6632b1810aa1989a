"""Shared fixtures: the toy-scale training matrix used by the acceptance suite.

Training the matrix is expensive (minutes), so it runs once per session and
is shared by every test that needs trained models.  All runs use the tiny
RGB backbone and a narrow semantic channel plan; mechanics (stages, freezing,
caching, evaluation) are identical to full-scale runs.
"""

import warnings
from dataclasses import dataclass, replace

import pytest

from semattn.config import (
    FusionConfig,
    ModelConfig,
    RgbBranchConfig,
    SemanticBranchConfig,
)
from semattn.data_pipeline import restrict_semantic_classes
from semattn.evaluation import compute_metrics, predict_records
from semattn.toy import ToySpec, generate
from semattn.training import ArrayDataset, TrainConfig, train_stage

TOY_SEEDS = (1, 2, 3)
TOY_K = 4
TOY_L = 12
RESTRICTED_L = 4

TOY_MODEL = ModelConfig(
    rgb=RgbBranchConfig(backbone="tiny_residual"),
    semantic=SemanticBranchConfig(
        num_semantic_classes=TOY_L, channel_plan=(16, 32, 64, 96)
    ),
    fusion=FusionConfig(num_scene_classes=TOY_K),
)

RGB_TRAIN = dict(max_epochs=40, batch_size=16, augment=True,
                 learning_rate=0.02, lr_decay_every=20)
SEM_TRAIN = dict(max_epochs=30, batch_size=16, augment=True,
                 learning_rate=0.05, lr_decay_every=15)
FUSION_TRAIN = dict(max_epochs=18, batch_size=16, augment=False,
                    learning_rate=0.05, lr_decay_every=9)
# the non-gated mechanisms lack the (0,1) gate bounding the fused features,
# so their stable learning rate is an order of magnitude lower
VARIANT_FUSION_TRAIN = dict(max_epochs=14, batch_size=16, augment=False,
                            learning_rate=0.005, lr_decay_every=7)
RESTRICTED_SEM_TRAIN = dict(max_epochs=20, batch_size=16, augment=True,
                            learning_rate=0.05, lr_decay_every=10)


def evaluate(ckpt, dataset, num_classes=TOY_K):
    from semattn.cli import model_from_checkpoint

    model, kind = model_from_checkpoint(ckpt)
    records = predict_records(
        model, dataset.samples, kind=kind, protocol="single", batch_size=32
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return compute_metrics(records, num_classes)


@dataclass
class SeedRuns:
    seed: int
    train_manifest: object
    val_manifest: object
    train_dataset: ArrayDataset
    val_dataset: ArrayDataset
    rgb_ckpt: object
    sem_ckpt: object
    fused_ckpt: object
    variant_ckpts: dict  # mechanism name -> checkpoint
    restricted_fused_ckpt: object
    val_metrics: dict  # name -> MetricsReport


def _train(stage, model_cfg, seed, tm, vm, tds, vds, log_path=None, **extra):
    presets = {
        "branch_rgb": RGB_TRAIN,
        "branch_semantic": SEM_TRAIN,
        "fusion": FUSION_TRAIN,
    }[stage]
    cfg = TrainConfig(stage=stage, seed=seed, **presets)
    return train_stage(
        model_cfg, cfg, tm, vm, train_dataset=tds, val_dataset=vds,
        log_path=log_path, **extra,
    )


def _run_seed(seed, root):
    spec = ToySpec(
        ambiguity=0.5, seed=seed, samples_per_class=16, val_samples_per_class=12
    )
    tm, vm = generate(spec, root)
    tds, vds = ArrayDataset(tm), ArrayDataset(vm)

    rgb = _train("branch_rgb", TOY_MODEL, seed, tm, vm, tds, vds,
                 log_path=root / "rgb_log.jsonl")
    sem = _train("branch_semantic", TOY_MODEL, seed, tm, vm, tds, vds,
                 log_path=root / "sem_log.jsonl")
    fused = _train("fusion", TOY_MODEL, seed, tm, vm, tds, vds,
                   log_path=root / "fusion_log.jsonl",
                   rgb_checkpoint=rgb, semantic_checkpoint=sem)

    variant_ckpts = {}
    for mechanism in ("hadamard", "additive"):
        cfg = replace(TOY_MODEL, fusion=replace(TOY_MODEL.fusion, mechanism=mechanism))
        tc = TrainConfig(stage="fusion", seed=seed, **VARIANT_FUSION_TRAIN)
        variant_ckpts[mechanism] = train_stage(
            cfg, tc, tm, vm, train_dataset=tds, val_dataset=vds,
            rgb_checkpoint=rgb, semantic_checkpoint=sem,
        )

    # restricted semantic label set (L=12 -> 4), rgb branch reused
    rtm = restrict_semantic_classes(tm, RESTRICTED_L, seed)
    rvm = restrict_semantic_classes(vm, RESTRICTED_L, seed)
    rtds, rvds = ArrayDataset(rtm), ArrayDataset(rvm)
    tc = TrainConfig(stage="branch_semantic", seed=seed, **RESTRICTED_SEM_TRAIN)
    rsem = train_stage(TOY_MODEL, tc, rtm, rvm, train_dataset=rtds, val_dataset=rvds)
    # same fusion recipe as the headline model so criterion 7 compares like
    # with like: only the label set differs
    tc = TrainConfig(stage="fusion", seed=seed, **FUSION_TRAIN)
    rfused = train_stage(
        TOY_MODEL, tc, rtm, rvm, train_dataset=rtds, val_dataset=rvds,
        rgb_checkpoint=rgb, semantic_checkpoint=rsem,
    )

    metrics = {
        "rgb": evaluate(rgb, vds),
        "semantic": evaluate(sem, vds),
        "fused": evaluate(fused, vds),
        "hadamard": evaluate(variant_ckpts["hadamard"], vds),
        "additive": evaluate(variant_ckpts["additive"], vds),
        "restricted_fused": evaluate(rfused, rvds),
        "rgb_train": evaluate(rgb, tds),
        "semantic_train": evaluate(sem, tds),
        "fused_train": evaluate(fused, tds),
    }
    return SeedRuns(
        seed=seed,
        train_manifest=tm,
        val_manifest=vm,
        train_dataset=tds,
        val_dataset=vds,
        rgb_ckpt=rgb,
        sem_ckpt=sem,
        fused_ckpt=fused,
        variant_ckpts=variant_ckpts,
        restricted_fused_ckpt=rfused,
        val_metrics=metrics,
    )


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    runs = {}
    for seed in TOY_SEEDS:
        root = tmp_path_factory.mktemp(f"toyrun_seed{seed}")
        runs[seed] = _run_seed(seed, root)
    return runs


# filled by acceptance tests via the `acceptance_note` fixture; the terminal
# summary appends each note to its criterion's PASS/FAIL line
ACCEPTANCE_NOTES: dict[int, str] = {}


@pytest.fixture
def acceptance_note():
    def note(number: int, text: str) -> None:
        ACCEPTANCE_NOTES[number] = text

    return note


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::")[-1].replace("test_criterion_", "")
            number, _, slug = name.partition("_")
            status = "PASS" if outcome == "passed" else "FAIL"
            note = ACCEPTANCE_NOTES.get(int(number))
            suffix = f"  ({note})" if note else ""
            lines.append((int(number), f"ACCEPTANCE {number} {slug}: {status}{suffix}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
