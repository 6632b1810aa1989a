"""Declarative model configuration.

A ModelConfig fully determines the network topology; it is serialized into
every checkpoint so a saved model can be rebuilt without external context.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError

RGB_BACKBONES = ("residual18", "residual50", "tiny_residual")
SEMANTIC_BACKBONES = ("conv4", "conv3", "resnet18_style")
FUSION_MECHANISMS = (
    "additive",
    "concat",
    "hadamard",
    "gated_rgb_hadamard",
    "gated_sem_hadamard",
)
CONV_PLANS = ("none", "two_1x1", "two_3x3", "three_3x3")

# short spellings accepted in config files / CLI flags
MECHANISM_ALIASES = {
    "g_rgb_h": "gated_rgb_hadamard",
    "g_sem_h": "gated_sem_hadamard",
}

# Default channel progressions for the shallow semantic backbones.  Both end
# at 512 channels so the branch output matches the RGB branch without an
# extra projection; widths are sized so the learnable-parameter budget of the
# L=150 configuration lands near 2.6M (conv4) and 6.5M (conv3).
DEFAULT_CHANNEL_PLANS = {
    "conv4": (96, 192, 384, 512),
    "conv3": (160, 320, 512),
}


def canonical_mechanism(name: str) -> str:
    name = MECHANISM_ALIASES.get(name, name)
    if name not in FUSION_MECHANISMS:
        raise ConfigError(f"unknown fusion mechanism {name!r}")
    return name


@dataclass(frozen=True)
class RgbBranchConfig:
    backbone: str = "residual18"
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.backbone not in RGB_BACKBONES:
            raise ConfigError(f"unknown RGB backbone {self.backbone!r}")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")


@dataclass(frozen=True)
class SemanticBranchConfig:
    backbone: str = "conv4"
    use_cham: bool = True
    channel_plan: tuple[int, ...] | None = None  # None -> backbone default
    num_semantic_classes: int = 150
    cham_ratio: int | None = None  # None -> 16 when c >= 16, else 1

    def __post_init__(self):
        if self.backbone not in SEMANTIC_BACKBONES:
            raise ConfigError(f"unknown semantic backbone {self.backbone!r}")
        if self.num_semantic_classes < 1:
            raise ConfigError("num_semantic_classes must be >= 1")
        if self.channel_plan is not None:
            object.__setattr__(self, "channel_plan", tuple(self.channel_plan))
            if any(c < 1 for c in self.channel_plan):
                raise ConfigError("channel_plan entries must be positive")
            depth = {"conv4": 4, "conv3": 3}.get(self.backbone)
            if depth is not None and len(self.channel_plan) != depth:
                raise ConfigError(
                    f"{self.backbone} expects {depth} channel_plan entries, "
                    f"got {len(self.channel_plan)}"
                )

    def resolved_channel_plan(self) -> tuple[int, ...]:
        if self.channel_plan is not None:
            return self.channel_plan
        if self.backbone in DEFAULT_CHANNEL_PLANS:
            return DEFAULT_CHANNEL_PLANS[self.backbone]
        raise ConfigError(f"{self.backbone} has no channel plan")


@dataclass(frozen=True)
class FusionConfig:
    mechanism: str = "gated_rgb_hadamard"
    conv_plan: str = "two_3x3"
    dropout_p: float = 0.5
    num_scene_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "mechanism", canonical_mechanism(self.mechanism))
        if self.conv_plan not in CONV_PLANS:
            raise ConfigError(f"unknown conv_plan {self.conv_plan!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.num_scene_classes < 2:
            raise ConfigError("num_scene_classes must be >= 2")


@dataclass(frozen=True)
class ModelConfig:
    rgb: RgbBranchConfig = field(default_factory=RgbBranchConfig)
    semantic: SemanticBranchConfig = field(default_factory=SemanticBranchConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        plan = d["semantic"]["channel_plan"]
        if plan is not None:
            d["semantic"]["channel_plan"] = list(plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        sem = dict(d["semantic"])
        if sem.get("channel_plan") is not None:
            sem["channel_plan"] = tuple(sem["channel_plan"])
        return cls(
            rgb=RgbBranchConfig(**d["rgb"]),
            semantic=SemanticBranchConfig(**sem),
            fusion=FusionConfig(**d["fusion"]),
        )

    def with_classes(self, num_scene: int | None = None, num_semantic: int | None = None):
        """Return a copy with class counts filled in (e.g. from a manifest)."""
        cfg = self
        if num_scene is not None:
            cfg = replace(cfg, fusion=replace(cfg.fusion, num_scene_classes=num_scene))
        if num_semantic is not None:
            cfg = replace(
                cfg, semantic=replace(cfg.semantic, num_semantic_classes=num_semantic)
            )
        return cfg


def default_cham_ratio(channels: int) -> int:
    """16 for wide layers, 1 when the bottleneck would vanish."""
    if channels >= 16 and channels % 16 == 0:
        return 16
    return 1
