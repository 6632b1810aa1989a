"""Channel attention: squeeze spatially, bottleneck, per-channel sigmoid gate.

The same two weight matrices process both the average-pooled and the
max-pooled channel statistics; the two results are summed before the
sigmoid.  The bottleneck carries no bias terms.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import default_cham_ratio
from .errors import ShapeError, TrainingDiverged


def apply_channel_gate(features: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """Broadcast a per-channel gate over the spatial dimensions.

    features: (..., c, h, w); gate: (..., c) matching the leading dims.
    """
    if gate.shape[-1] != features.shape[-3]:
        raise ShapeError(
            f"gate has {gate.shape[-1]} channels, features have {features.shape[-3]}"
        )
    return gate[..., None, None] * features


class ChannelAttention(nn.Module):
    """The gate module; `attention()` returns the map, `forward()` applies it."""

    def __init__(self, channels: int, ratio: int | None = None):
        super().__init__()
        if ratio is None:
            ratio = default_cham_ratio(channels)
        if ratio < 1 or channels % ratio != 0:
            raise ShapeError(f"reduction ratio {ratio} must divide channels {channels}")
        self.channels = channels
        self.ratio = ratio
        self.fc1 = nn.Linear(channels, channels // ratio, bias=False)  # (c/r, c)
        self.fc2 = nn.Linear(channels // ratio, channels, bias=False)  # (c, c/r)
        self._bypass = False  # test hook: identity gate

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel gate in (0, 1); x is (n, c, h, w) or (c, h, w)."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        f_avg = x.mean(dim=(2, 3))
        # max over flattened spatial dims: ties route the subgradient to the
        # first maximal position in row-major order
        f_max = x.flatten(2).max(dim=2).values
        if not (torch.isfinite(f_avg).all() and torch.isfinite(f_max).all()):
            raise TrainingDiverged("non-finite values entering channel attention")
        f1 = self.fc2(F.relu(self.fc1(f_avg)))
        f2 = self.fc2(F.relu(self.fc1(f_max)))
        gate = torch.sigmoid(f1 + f2)
        return gate.squeeze(0) if squeeze else gate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._bypass:
            return x
        return apply_channel_gate(x, self.attention(x))
