"""Satellite-branch fusion and the dense localization heads.

The satellite pyramid collapses top-down to the finest grid, gains context
through parallel dilated convolutions, and is correlated with the UAV
stage-1 feature map by grouped convolution. A classification branch
upsamples the correlation response to a full-resolution heatmap; a
regression branch predicts per-pixel (x, y) corrections.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import OneStreamBackbone
from .config import BackboneConfig, FusionConfig
from .errors import DimensionMismatch, InvalidArgument


def _init_conv(conv: nn.Conv2d) -> None:
    nn.init.trunc_normal_(conv.weight, std=0.02)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class FeaturePyramid(nn.Module):
    """Top-down collapse of the satellite ladder onto the finest grid.

    Each level passes through a 1x1 lateral projection; deeper levels are
    nearest-upsampled by 2 and summed, and a single 3x3 convolution smooths
    the finest map.
    """

    def __init__(self, in_channels: list[int], out_channels: int):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooth = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        for conv in (*self.laterals, self.smooth):
            _init_conv(conv)

    def forward(self, maps: list[torch.Tensor]) -> torch.Tensor:
        if len(maps) != len(self.laterals):
            raise DimensionMismatch(f"expected {len(self.laterals)} levels, got {len(maps)}")
        for level, (shallow, deep) in enumerate(zip(maps, maps[1:])):
            sh, sw = shallow.shape[-2:]
            if deep.shape[-2:] != (sh // 2, sw // 2) or sh % 2 or sw % 2:
                raise DimensionMismatch(
                    f"level {level + 1} grid {tuple(deep.shape[-2:])} is not half of "
                    f"level {level} grid {(sh, sw)}"
                )
        top = self.laterals[-1](maps[-1])
        for lateral, feature in zip(reversed(self.laterals[:-1]), reversed(maps[:-1])):
            top = lateral(feature) + F.interpolate(top, scale_factor=2, mode="nearest")
        return self.smooth(top)


class AtrousContext(nn.Module):
    """Parallel dilated 3x3 convolutions, concatenated and fused by a 3x3."""

    def __init__(self, channels: int, rates: list[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=rate, dilation=rate) for rate in rates
        )
        self.fuse = nn.Conv2d(channels * len(rates), channels, 3, padding=1)
        for conv in (*self.branches, self.fuse):
            _init_conv(conv)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fuse(torch.cat([branch(x) for branch in self.branches], dim=1))


class GroupCorrelation(nn.Module):
    """Slides the UAV feature map over the satellite map as a grouped kernel.

    Zero "same" padding keeps the response on the satellite grid; with an
    even kernel the extra padding row/column goes on the bottom/right. The
    grouped responses collapse to one channel through a learnable 1x1.
    """

    def __init__(self, channels: int, groups: int):
        super().__init__()
        if channels % groups:
            raise InvalidArgument(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.project = nn.Conv2d(groups, 1, 1)
        _init_conv(self.project)

    def forward(self, kernel: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        batch, channels, kh, kw = kernel.shape
        if feature.shape[0] != batch:
            raise DimensionMismatch(
                f"kernel batch {batch} != feature batch {feature.shape[0]}"
            )
        if feature.shape[1] != channels:
            raise DimensionMismatch(
                f"kernel channels {channels} != feature channels {feature.shape[1]}"
            )
        if channels % self.groups:
            raise DimensionMismatch(f"channels {channels} not divisible by {self.groups} groups")
        fh, fw = feature.shape[-2:]
        padded = F.pad(feature, ((kw - 1) // 2, kw // 2, (kh - 1) // 2, kh // 2))
        response = F.conv2d(
            padded.reshape(1, batch * channels, *padded.shape[-2:]),
            kernel.reshape(batch * self.groups, channels // self.groups, kh, kw),
            groups=batch * self.groups,
        ).reshape(batch, self.groups, fh, fw)
        return self.project(response)

    def raw_response(self, kernel: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        """Grouped responses before the 1x1 projection, summed over groups."""
        saved = self.project
        try:
            self.project = nn.Identity()
            grouped = self.forward(kernel, feature)
        finally:
            self.project = saved
        return grouped.sum(dim=1, keepdim=True)


class PredictionHead(nn.Module):
    """Nearest-neighbor heatmap upsampling plus the offset regression branch.

    The regression branch reads the fused context map, emits 2 channels
    (x then y correction, in full-resolution pixels), and starts from zero
    so early training is driven purely by the classification branch.
    """

    def __init__(self, channels: int, heatmap_size: int, offset_clamp: float = 16.0):
        super().__init__()
        if offset_clamp <= 0:
            raise InvalidArgument(f"offset_clamp must be positive, got {offset_clamp}")
        self.heatmap_size = heatmap_size
        self.offset_clamp = offset_clamp
        self.regress = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, 2, 1),
        )
        for layer in self.regress:
            if isinstance(layer, nn.Conv2d):
                _init_conv(layer)
        final = self.regress[-1]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)

    def forward(self, response: torch.Tensor, context: torch.Tensor):
        h, w = response.shape[-2:]
        if self.heatmap_size % h or self.heatmap_size % w:
            raise DimensionMismatch(
                f"heatmap size {self.heatmap_size} not a multiple of response grid {(h, w)}"
            )
        size = (self.heatmap_size, self.heatmap_size)
        heatmap = F.interpolate(response, size=size, mode="nearest")[:, 0]
        offsets = F.interpolate(self.regress(context), size=size, mode="nearest")
        return heatmap, offsets


@dataclass
class PredictionOutput:
    """Batched localization result at full heatmap resolution."""

    heatmap: torch.Tensor  # (B, H, W) raw matching scores
    offsets: torch.Tensor  # (B, H, W, 2) clamped (x, y) pixel corrections
    point: torch.Tensor  # (B, 2) refined (x, y) position in heatmap pixels
    argmax: torch.Tensor  # (B, 2) integer (x, y) of the peak, centered in its block
    peak: torch.Tensor  # (B,) heatmap value at the peak


def heatmap_argmax(heatmap: torch.Tensor) -> torch.Tensor:
    """Row-major first argmax of each (H, W) map as integer (x, y) pairs."""
    batch, _, width = heatmap.shape
    flat_index = heatmap.flatten(1).argmax(dim=1)
    return torch.stack([flat_index % width, flat_index // width], dim=1)


def build_prediction(
    heatmap: torch.Tensor, offsets: torch.Tensor, offset_clamp: float, block: int = 1
) -> PredictionOutput:
    """Combine raw head outputs into a refined point prediction.

    ``offsets`` arrives channels-first (B, 2, H, W) and is clamped to keep
    corrections local; the refined point adds the correction stored at the
    heatmap argmax. ``block`` is the nearest-upsample factor of the inputs:
    the peak value is constant over block x block cells, so the argmax is
    reported at the centered pixel of its cell rather than the corner the
    row-major scan lands on.
    """
    clamped = offsets.clamp(-offset_clamp, offset_clamp).permute(0, 2, 3, 1)
    argmax = heatmap_argmax(heatmap)
    if block > 1:
        argmax = argmax - argmax % block + block // 2
    rows = torch.arange(heatmap.shape[0], device=heatmap.device)
    at_peak = clamped[rows, argmax[:, 1], argmax[:, 0]]
    point = argmax.to(clamped.dtype) + at_peak
    peak = heatmap[rows, argmax[:, 1], argmax[:, 0]]
    return PredictionOutput(
        heatmap=heatmap, offsets=clamped, point=point, argmax=argmax, peak=peak
    )


class GeoLocalizer(nn.Module):
    """Full pipeline from image pair to heatmap and offset corrections."""

    def __init__(
        self,
        backbone_config: BackboneConfig | None = None,
        fusion_config: FusionConfig | None = None,
        offset_clamp: float = 16.0,
    ):
        super().__init__()
        self.backbone = OneStreamBackbone(backbone_config)
        self.fusion_config = fusion_config or FusionConfig()
        stage_channels = self.backbone.config.stage_channels
        if stage_channels[0] != self.fusion_config.fpn_channels:
            raise InvalidArgument(
                f"fpn_channels {self.fusion_config.fpn_channels} must equal the stage-1 "
                f"channel count {stage_channels[0]} so the UAV map can act as the kernel"
            )
        self.pyramid = FeaturePyramid(stage_channels, self.fusion_config.fpn_channels)
        self.context = AtrousContext(self.fusion_config.fpn_channels, self.fusion_config.atrous_rates)
        self.correlation = GroupCorrelation(self.fusion_config.fpn_channels, self.fusion_config.groups)
        self.head = PredictionHead(
            self.fusion_config.fpn_channels, self.fusion_config.heatmap_size, offset_clamp
        )

    def forward(self, uav: torch.Tensor, sat: torch.Tensor):
        """Raw training outputs: heatmap (B, H, W) and offsets (B, 2, H, W)."""
        features = self.backbone(uav, sat)
        fused = self.pyramid(features.sat)
        context = self.context(fused)
        response = self.correlation(features.uav[0], context)
        return self.head(response, context)

    @torch.no_grad()
    def predict(self, uav: torch.Tensor, sat: torch.Tensor) -> PredictionOutput:
        heatmap, offsets = self.forward(uav, sat)
        grid = sat.shape[-2] // self.backbone.config.patch_size
        block = self.fusion_config.heatmap_size // grid
        return build_prediction(heatmap, offsets, self.head.offset_clamp, block=block)
