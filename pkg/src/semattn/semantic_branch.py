"""Shallow convolutional branch over the densified semantic score tensor.

The branch downsamples a (L, 224, 224) input to the same 512 x 7 x 7 shape
the RGB branch produces.  Channel attention gates sit between convolutional
blocks (after every block except the last).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .cham import ChannelAttention
from .config import SemanticBranchConfig, default_cham_ratio
from .errors import ConfigError, ShapeError
from .rgb_branch import OUTPUT_CHANNELS, ResNetBackbone, _kaiming_convs


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, padding):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class SemanticBranch(nn.Module):
    """Emits the semantic feature map (512 x 7 x 7 for 224 x 224 x L input)."""

    def __init__(self, cfg: SemanticBranchConfig):
        super().__init__()
        self.cfg = cfg
        L = cfg.num_semantic_classes
        ratio = cfg.cham_ratio  # None -> per-width default inside ChannelAttention

        if cfg.backbone == "resnet18_style":
            self.blocks = None
            self.backbone = ResNetBackbone(
                L, 1.0, cham_ratio=(0 if not cfg.use_cham else ratio)
            )
            self.adapter = None
            self.pool = None
            return

        plan = cfg.resolved_channel_plan()
        if cfg.backbone == "conv4":
            # 224 -> 112 -> 56 -> 28 -> 14, then a 2x2 max-pool to 7
            kernels, strides, pads = [3] * 4, [2] * 4, [1] * 4
        elif cfg.backbone == "conv3":
            # 3 downsampling convs need larger kernels: 224 -> 56 -> 28 -> 14
            kernels, strides, pads = [5] * 3, [4, 2, 2], [2] * 3
        else:
            raise ConfigError(f"unknown semantic backbone {cfg.backbone!r}")

        blocks = []
        in_ch = L
        for i, out_ch in enumerate(plan):
            blocks.append(_ConvBlock(in_ch, out_ch, kernels[i], strides[i], pads[i]))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.gates = None
        if cfg.use_cham:
            self.gates = nn.ModuleList(
                ChannelAttention(plan[i], ratio) for i in range(len(plan) - 1)
            )
        self.pool = nn.MaxPool2d(2)
        self.adapter = None
        if plan[-1] != OUTPUT_CHANNELS:
            self.adapter = nn.Sequential(
                nn.Conv2d(plan[-1], OUTPUT_CHANNELS, 1, bias=False),
                nn.BatchNorm2d(OUTPUT_CHANNELS, affine=False),
                nn.ReLU(inplace=True),
            )
        self.backbone = None
        _kaiming_convs(self)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.dim() != 4 or m.shape[1] != self.cfg.num_semantic_classes:
            raise ShapeError(
                f"semantic branch expects (n, {self.cfg.num_semantic_classes}, h, w), "
                f"got {tuple(m.shape)}"
            )
        if self.backbone is not None:
            return self.backbone(m)
        x = m
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.gates is not None and i < len(self.gates):
                x = self.gates[i](x)
        x = self.pool(x)
        if self.adapter is not None:
            x = self.adapter(x)
        return x


def count_parameters(cfg: SemanticBranchConfig) -> int:
    """Exact learnable scalar count for a configuration."""
    return sum(p.numel() for p in SemanticBranch(cfg).parameters())


def conv_parameter_formula(cfg: SemanticBranchConfig) -> int:
    """Closed-form parameter count (convs + batch norm + attention gates)."""
    if cfg.backbone == "resnet18_style":
        raise ConfigError("closed form covers the shallow backbones only")
    plan = cfg.resolved_channel_plan()
    kernel = 3 if cfg.backbone == "conv4" else 5
    total = 0
    in_ch = cfg.num_semantic_classes
    for i, out_ch in enumerate(plan):
        total += kernel * kernel * in_ch * out_ch  # conv weight, bias-free
        total += 2 * out_ch  # batch-norm affine
        if cfg.use_cham and i < len(plan) - 1:
            r = cfg.cham_ratio or default_cham_ratio(out_ch)
            total += 2 * out_ch * (out_ch // r)
        in_ch = out_ch
    if plan[-1] != OUTPUT_CHANNELS:
        total += plan[-1] * OUTPUT_CHANNELS
    return total
