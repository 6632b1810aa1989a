"""Top@k and mean-class-accuracy metrics over prediction records."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .batching import model_inputs
from .data_pipeline import Sample, eval_transform, ten_crop_sample
from .errors import ShapeError, UndefinedMetricError
from .ioutil import atomic_write_json, atomic_write_text


@dataclass
class PredictionRecord:
    sample_id: str
    log_probs: np.ndarray  # length K, exp() sums to 1
    target: int

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if self.log_probs.ndim != 1:
            raise ShapeError("log_probs must be a vector")
        if not 0 <= self.target < self.log_probs.shape[0]:
            raise ShapeError(f"target {self.target} out of range")


@dataclass
class MetricsReport:
    top1: float
    top2: float
    top5: float
    mca: float
    per_class_top1: list  # length K; None for classes absent from the records
    n_samples: int
    protocol: str
    classes_covered: int

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top2": self.top2,
            "top5": self.top5,
            "mca": self.mca,
            "per_class_top1": self.per_class_top1,
            "n_samples": self.n_samples,
            "protocol": self.protocol,
            "classes_covered": self.classes_covered,
        }


def ranked_classes(log_probs: np.ndarray) -> np.ndarray:
    """Class indices from best to worst; ties break toward the lower index."""
    return np.argsort(-np.asarray(log_probs), kind="stable")


def top_k_accuracy(records: list[PredictionRecord], k: int) -> float:
    if not records:
        raise UndefinedMetricError("Top@k over an empty record set")
    num_classes = records[0].log_probs.shape[0]
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must be in [1, {num_classes}], got {k}")
    correct = sum(1 for r in records if r.target in ranked_classes(r.log_probs)[:k])
    return 100.0 * correct / len(records)


def per_class_top1(records: list[PredictionRecord], num_classes: int) -> list:
    correct = [0] * num_classes
    total = [0] * num_classes
    for r in records:
        total[r.target] += 1
        if int(ranked_classes(r.log_probs)[0]) == r.target:
            correct[r.target] += 1
    return [
        (100.0 * c / t) if t > 0 else None for c, t in zip(correct, total)
    ]


def mean_class_accuracy(records: list[PredictionRecord], num_classes: int) -> float:
    """Unweighted mean of per-class Top@1 over the classes present."""
    if not records:
        raise UndefinedMetricError("MCA over an empty record set")
    per_class = per_class_top1(records, num_classes)
    covered = [v for v in per_class if v is not None]
    missing = num_classes - len(covered)
    if missing:
        warnings.warn(
            f"MCA computed over {len(covered)}/{num_classes} classes; "
            f"{missing} classes have no validation samples",
            stacklevel=2,
        )
    return sum(covered) / len(covered)


def compute_metrics(
    records: list[PredictionRecord], num_classes: int, protocol: str = "single"
) -> MetricsReport:
    per_class = per_class_top1(records, num_classes)
    covered = sum(1 for v in per_class if v is not None)
    return MetricsReport(
        top1=top_k_accuracy(records, 1),
        top2=top_k_accuracy(records, min(2, num_classes)),
        top5=top_k_accuracy(records, min(5, num_classes)),
        mca=mean_class_accuracy(records, num_classes),
        per_class_top1=per_class,
        n_samples=len(records),
        protocol=protocol,
        classes_covered=covered,
    )


# ---------------------------------------------------------------------------
# crop aggregation


def average_crop_log_probs(crop_log_probs: np.ndarray) -> np.ndarray:
    """Aggregate per-crop predictions by averaging probabilities, re-logged."""
    crop_log_probs = np.asarray(crop_log_probs, dtype=np.float64)
    if crop_log_probs.ndim != 2:
        raise ShapeError("expected (n_crops, K) log-probabilities")
    mean_probs = np.exp(crop_log_probs).mean(axis=0)
    return np.log(mean_probs)


@torch.no_grad()
def predict_records(
    model: torch.nn.Module,
    samples: list[Sample],
    kind: str = "fused",
    protocol: str = "single",
    batch_size: int = 16,
) -> list[PredictionRecord]:
    """Run a model over raw (uncropped) samples under the chosen protocol."""
    model.eval()
    records = []
    if protocol == "single":
        cropped = [eval_transform(s) for s in samples]
        for i in range(0, len(cropped), batch_size):
            chunk = cropped[i : i + batch_size]
            log_probs = model(*model_inputs(chunk, kind)).double().cpu().numpy()
            for s, lp in zip(chunk, log_probs):
                records.append(PredictionRecord(s.id, lp, s.scene_label))
        return records
    if protocol == "ten_crop":
        for s in samples:
            crops = ten_crop_sample(s)
            log_probs = model(*model_inputs(crops, kind)).double().cpu().numpy()
            records.append(
                PredictionRecord(s.id, average_crop_log_probs(log_probs), s.scene_label)
            )
        return records
    raise ValueError(f"unknown protocol {protocol!r}")


def ten_crop_predict(model: torch.nn.Module, sample: Sample, kind: str = "fused") -> PredictionRecord:
    return predict_records(model, [sample], kind=kind, protocol="ten_crop")[0]


# ---------------------------------------------------------------------------
# report files


def write_metrics_json(report: MetricsReport, path) -> None:
    atomic_write_json(path, report.to_dict())


def write_predictions_jsonl(records: list[PredictionRecord], path) -> None:
    lines = []
    for r in records:
        top5 = ranked_classes(r.log_probs)[:5]
        lines.append(
            json.dumps(
                {
                    "id": r.sample_id,
                    "target": int(r.target),
                    "top5_labels": [int(c) for c in top5],
                    "top5_log_probs": [float(r.log_probs[c]) for c in top5],
                },
                sort_keys=True,
            )
        )
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
