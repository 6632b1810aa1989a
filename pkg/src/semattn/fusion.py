"""Attention fusion: adapt both feature maps, combine, classify.

The default combination multiplies ReLU-adapted RGB features by a
sigmoid-normalized semantic map, so the semantic pathway gates the RGB
pathway without rescaling it.  Alternative mechanisms (sum, concatenation,
plain product, reversed gating) share the adapter topology and differ only
in where the sigmoid sits and how the two maps merge.
"""

from __future__ import annotations

import contextlib

import torch
import torch.nn.functional as F
from torch import nn

from .config import FusionConfig, ModelConfig
from .errors import ConfigError, ShapeError
from .rgb_branch import OUTPUT_CHANNELS, RgbBranch, _kaiming_convs
from .semantic_branch import SemanticBranch

# conv_plan -> list of (kernel, out_channels); input is always 512 x 7 x 7
_PLANS = {
    "none": [],
    "two_1x1": [(1, 512), (1, 1024)],
    "two_3x3": [(3, 512), (3, 1024)],
    "three_3x3": [(3, 512), (3, 1024), (3, 1024)],
}


def plan_output_channels(conv_plan: str) -> int:
    layers = _PLANS[conv_plan]
    return layers[-1][1] if layers else OUTPUT_CHANNELS


# which adapter output passes through a sigmoid, per mechanism
_GATED_SIDES = {
    "additive": (False, False),
    "concat": (False, False),
    "hadamard": (False, False),
    "gated_rgb_hadamard": (False, True),  # semantic map gates RGB features
    "gated_sem_hadamard": (True, False),  # RGB map gates semantic features
}


class BranchAdapter(nn.Module):
    """Unpadded conv stack (ReLU after each layer), optionally sigmoid-capped."""

    def __init__(self, conv_plan: str, gated: bool):
        super().__init__()
        self.gated = gated
        layers = []
        in_ch = OUTPUT_CHANNELS
        for i, (kernel, out_ch) in enumerate(_PLANS[conv_plan], start=1):
            conv = nn.Conv2d(in_ch, out_ch, kernel, stride=1, padding=0, bias=True)
            self.add_module(f"conv{i}", conv)
            layers.append(conv)
            in_ch = out_ch
        self._convs = layers
        self._gate_fn = torch.sigmoid  # internal hook; tests may swap in identity
        _kaiming_convs(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self._convs:
            x = F.relu(conv(x))
        if self.gated:
            x = self._gate_fn(x)
        return x


class AttentionFusion(nn.Module):
    """Adapters + combiner + average-pool/dropout/linear classifier."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        rgb_gated, sem_gated = _GATED_SIDES[cfg.mechanism]
        self.rgb_adapter = BranchAdapter(cfg.conv_plan, gated=rgb_gated)
        self.sem_adapter = BranchAdapter(cfg.conv_plan, gated=sem_gated)
        channels = plan_output_channels(cfg.conv_plan)
        if cfg.mechanism == "concat":
            channels *= 2
        self.fused_channels = channels
        self.dropout = nn.Dropout(cfg.dropout_p)
        self.classifier = nn.Linear(channels, cfg.num_scene_classes)

    def adapt_rgb(self, f_i: torch.Tensor) -> torch.Tensor:
        return self.rgb_adapter(f_i)

    def adapt_semantic(self, f_m: torch.Tensor) -> torch.Tensor:
        return self.sem_adapter(f_m)

    def fuse(self, f_ia: torch.Tensor, f_ma: torch.Tensor) -> torch.Tensor:
        mech = self.cfg.mechanism
        if mech == "concat":
            return torch.cat([f_ia, f_ma], dim=-3)
        if f_ia.shape != f_ma.shape:
            raise ShapeError(f"operand shapes differ: {tuple(f_ia.shape)} vs {tuple(f_ma.shape)}")
        if mech == "additive":
            return f_ia + f_ma
        return f_ia * f_ma  # hadamard and both gated variants

    def classify(self, f_a: torch.Tensor) -> torch.Tensor:
        if f_a.shape[-3] != self.fused_channels:
            raise ShapeError(
                f"classifier expects {self.fused_channels} channels, got {f_a.shape[-3]}"
            )
        pooled = f_a.mean(dim=(-2, -1))
        logits = self.classifier(self.dropout(pooled))
        return F.log_softmax(logits, dim=-1)

    def forward(self, f_i: torch.Tensor, f_m: torch.Tensor) -> torch.Tensor:
        return self.classify(self.fuse(self.adapt_rgb(f_i), self.adapt_semantic(f_m)))


class BranchClassifier(nn.Module):
    """Temporary stage-1 head: average pool + linear + log-softmax."""

    def __init__(self, num_classes: int, in_channels: int = OUTPUT_CHANNELS):
        super().__init__()
        self.classifier = nn.Linear(in_channels, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.classifier(features.mean(dim=(-2, -1))), dim=-1)


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except Exception as exc:
        raise RuntimeError(f"[{name}] {exc}") from exc


class SceneRecognitionModel(nn.Module):
    """Two branches plus the attention fusion head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.rgb = RgbBranch(config.rgb)
        self.semantic = SemanticBranch(config.semantic)
        self.fusion = AttentionFusion(config.fusion)

    def forward(self, image: torch.Tensor, semantics: torch.Tensor) -> torch.Tensor:
        """image: (n, 3, 224, 224); semantics: densified (n, L, 224, 224)."""
        with _stage("rgb_branch"):
            f_i = self.rgb(image)
        with _stage("semantic_branch"):
            f_m = self.semantic(semantics)
        with _stage("attention_fusion"):
            return self.fusion(f_i, f_m)

    def branch_parameters(self):
        yield from self.rgb.parameters()
        yield from self.semantic.parameters()

    def fusion_parameters(self):
        yield from self.fusion.parameters()


class BranchModel(nn.Module):
    """A single branch with its temporary stage-1 classifier head."""

    def __init__(self, branch: nn.Module, num_classes: int):
        super().__init__()
        self.branch = branch
        self.head = BranchClassifier(num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.branch(x))


def build_model(config: ModelConfig) -> SceneRecognitionModel:
    return SceneRecognitionModel(config)


def build_branch_model(config: ModelConfig, which: str) -> BranchModel:
    if which == "rgb":
        return BranchModel(RgbBranch(config.rgb), config.fusion.num_scene_classes)
    if which == "semantic":
        return BranchModel(SemanticBranch(config.semantic), config.fusion.num_scene_classes)
    raise ConfigError(f"unknown branch {which!r}")
