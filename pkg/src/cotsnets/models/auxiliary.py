"""Per-domain auxiliary branches built from hybrid channel/spatial attention."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .universal import DECODER_LAST_CHANNELS, ModelConfig


class ChannelAttention(nn.Module):
    """Squeeze-excitation style gate: sigmoid(W2 relu(W1 gap(x)))."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"channel count {channels} is below the reduction ratio {reduction}")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        # Few hidden units: start them in the active ReLU region so none is dead at init.
        nn.init.constant_(self.fc1.bias, 1.0)

    def forward(self, x):
        gap = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(gap))))
        return gate, x * gate[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        gate = torch.sigmoid(self.conv(pooled))
        return gate, x * gate


@dataclass
class HaamOutput:
    channel_gate: torch.Tensor
    channel_out: torch.Tensor
    spatial_gate: torch.Tensor
    spatial_out: torch.Tensor


class HAAM(nn.Module):
    """Channel attention followed by spatial attention on its output."""

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def run(self, x) -> HaamOutput:
        cg, cx = self.channel(x)
        sg, sx = self.spatial(cx)
        return HaamOutput(cg, cx, sg, sx)

    def forward(self, x):
        return self.run(x).spatial_out


class ChannelMLP(nn.Module):
    """Two linear layers applied independently at every pixel."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        t = x.permute(0, 2, 3, 1)
        t = self.fc2(F.gelu(self.fc1(t)))
        return t.permute(0, 3, 1, 2)


@dataclass
class AuxFusion:
    per_level_mlp: list
    interpolated: list
    concatenated: torch.Tensor
    projected: torch.Tensor


class AuxiliaryBranch(nn.Module):
    """Expert head for one domain.

    Each encoder level goes through HAAM and an MLP, is resized to the
    decoder's H/4 grid and concatenated; a 1x1 projection brings the stack to
    the decoder width, the last decoder feature is added, and a 1x1 head plus
    sigmoid gives the map that is finally upsampled to the input size.
    """

    def __init__(self, stage_channels, decoder_channels: int = DECODER_LAST_CHANNELS,
                 reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        self.stage_channels = list(stage_channels)
        self.haam = nn.ModuleList(HAAM(c, reduction, spatial_kernel) for c in self.stage_channels)
        self.mlp = nn.ModuleList(ChannelMLP(c) for c in self.stage_channels)
        self.proj = nn.Conv2d(sum(self.stage_channels), decoder_channels, 1)
        self.head = nn.Conv2d(decoder_channels, 1, 1)

    def fuse(self, encoder_features, size) -> AuxFusion:
        if len(encoder_features) != len(self.stage_channels):
            raise ValueError(
                f"expected {len(self.stage_channels)} encoder levels, got {len(encoder_features)}"
            )
        mlps, interp = [], []
        for feat, haam, mlp in zip(encoder_features, self.haam, self.mlp):
            f = mlp(haam(feat))
            mlps.append(f)
            interp.append(F.interpolate(f, size=size, mode="bilinear", align_corners=False))
        cat = torch.cat(interp, dim=1)
        return AuxFusion(mlps, interp, cat, self.proj(cat))

    def forward(self, encoder_features, decoder_last, out_size=None):
        size = tuple(decoder_last.shape[-2:])
        out_size = out_size or (4 * size[0], 4 * size[1])
        fused = self.fuse(encoder_features, size).projected + decoder_last
        prob = torch.sigmoid(self.head(fused))
        return F.interpolate(prob, size=out_size, mode="bilinear", align_corners=False)


def build_auxiliary(config: ModelConfig, reduction: int = 8, spatial_kernel: int = 7) -> nn.ModuleDict:
    """One branch per domain; branches share an architecture but no parameters."""
    return nn.ModuleDict({
        d: AuxiliaryBranch(config.stage_channels, DECODER_LAST_CHANNELS, reduction, spatial_kernel)
        for d in ("source", "target")
    })
