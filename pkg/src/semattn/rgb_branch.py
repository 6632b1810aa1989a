"""Residual feature extractors for the RGB pathway.

All configurations emit a 512 x 7 x 7 feature map for 224 x 224 input:
backbones whose natural output width differs (the 1/8-width tiny variant,
the bottleneck-50 variant at 2048) append a 1 x 1 projection so downstream
fusion shapes hold.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .cham import ChannelAttention
from .config import RgbBranchConfig
from .errors import ConfigError, ShapeError

BASE_WIDTHS = (64, 128, 256, 512)
OUTPUT_CHANNELS = 512


def _kaiming_convs(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, cham_ratio: int | None = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        # channel attention inside the block (semantic resnet18_style only)
        self.cham = ChannelAttention(out_ch, None if cham_ratio == 0 else cham_ratio) if cham_ratio != 0 else None

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.cham is not None:
            out = self.cham(out)
        shortcut = x if self.downsample is None else self.downsample(x)
        return F.relu(out + shortcut)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int = 1, cham_ratio: int | None = 0):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        shortcut = x if self.downsample is None else self.downsample(x)
        return F.relu(out + shortcut)


class ResNetBackbone(nn.Module):
    """Stem + four stages; stages 2-4 halve the spatial dims."""

    def __init__(
        self,
        in_channels: int = 3,
        width_multiplier: float = 1.0,
        block: type = BasicBlock,
        blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2),
        cham_ratio: int | None = 0,
    ):
        super().__init__()
        widths = [max(1, round(w * width_multiplier)) for w in BASE_WIDTHS]
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)

        ch = widths[0]
        stages = []
        for stage_idx, (w, n) in enumerate(zip(widths, blocks_per_stage)):
            stride = 1 if stage_idx == 0 else 2
            blocks = []
            for b in range(n):
                blocks.append(block(ch, w, stride if b == 0 else 1, cham_ratio))
                ch = w * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.out_channels = ch

        # project to the common 512-channel interface when widths differ;
        # the affine-free norm pins the interface to unit scale, so stage-1
        # feature inflation cannot destabilize the downstream fusion module
        self.adapter = None
        if ch != OUTPUT_CHANNELS:
            self.adapter = nn.Sequential(
                nn.Conv2d(ch, OUTPUT_CHANNELS, 1, bias=False),
                nn.BatchNorm2d(OUTPUT_CHANNELS, affine=False),
                nn.ReLU(inplace=True),
            )
        _kaiming_convs(self)

    def forward(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        for stage in self.stages:
            x = stage(x)
        if self.adapter is not None:
            x = self.adapter(x)
        return x


# Key-name mapping for importing externally pre-trained residual weights
# (the common torchvision layout): conv1/bn1 form the stem and layerN.M.*
# maps onto stages.N-1.M.*.  Keys with no counterpart here (fc.*) are
# dropped; shortcut projections arrive as downsample.* on both sides.
def external_key_map(name: str) -> str | None:
    if name.startswith("fc."):
        return None
    if name.startswith(("conv1.", "bn1.")):
        return f"backbone.{name}"
    if name.startswith("layer"):
        stage = int(name[5]) - 1
        return f"backbone.stages.{stage}.{name[7:]}"
    return None


def load_external_backbone(branch: "RgbBranch", state_dict: dict) -> list[str]:
    """Copy externally trained weights into the branch; returns skipped keys.

    Shapes must match, so this fits width_multiplier=1 configurations
    (residual18 from an 18-layer export, residual50 from a 50-layer one).
    """
    mapped = {}
    skipped = []
    for key, value in state_dict.items():
        target = external_key_map(key)
        if target is None:
            skipped.append(key)
            continue
        mapped[target] = value
    missing, unexpected = branch.load_state_dict(mapped, strict=False)
    if unexpected:
        raise ShapeError(f"external keys with no destination: {unexpected[:5]}")
    return skipped


class RgbBranch(nn.Module):
    """Emits the RGB feature map (512 x 7 x 7 for 224 x 224 input)."""

    def __init__(self, cfg: RgbBranchConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "residual18":
            self.backbone = ResNetBackbone(3, cfg.width_multiplier)
        elif cfg.backbone == "tiny_residual":
            self.backbone = ResNetBackbone(3, cfg.width_multiplier / 8.0)
        elif cfg.backbone == "residual50":
            self.backbone = ResNetBackbone(
                3, cfg.width_multiplier, block=Bottleneck, blocks_per_stage=(3, 4, 6, 3)
            )
        else:
            raise ConfigError(f"unknown RGB backbone {cfg.backbone!r}")
        self.out_channels = OUTPUT_CHANNELS

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"RGB branch expects (n, 3, h, w), got {tuple(x.shape)}")
        return self.backbone(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
