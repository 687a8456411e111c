"""One-stream pyramid encoder shared by the UAV and satellite crops.

Both images pass through the same three-stage transformer. Tokens from the
two domains travel as one merged sequence (UAV rows first), which lets the
satellite stream attend to UAV content at every block while the UAV stream
stays self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import BackboneConfig
from .errors import DimensionMismatch, InvalidArgument, SplitPointError


def tokens_to_grid(tokens: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Reshape (B, h*w, C) row-major tokens into a (B, C, h, w) feature map."""
    batch, length, channels = tokens.shape
    h, w = grid
    if length != h * w:
        raise DimensionMismatch(f"{length} tokens cannot fill a {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(batch, channels, h, w)


def grid_to_tokens(feature_map: torch.Tensor) -> torch.Tensor:
    """Flatten a (B, C, h, w) feature map into (B, h*w, C) row-major tokens."""
    return feature_map.flatten(2).transpose(1, 2)


@dataclass
class TokenSequence:
    """Merged UAV-then-satellite token rows plus their source grid shapes."""

    tokens: torch.Tensor  # (B, L_u + L_s, C)
    uav_grid: tuple[int, int]
    sat_grid: tuple[int, int] | None = None

    def __post_init__(self):
        expected = self.uav_len + self.sat_len
        if self.tokens.shape[1] != expected:
            raise SplitPointError(
                f"sequence length {self.tokens.shape[1]} does not match "
                f"UAV {self.uav_len} + SAT {self.sat_len}"
            )

    @property
    def uav_len(self) -> int:
        return self.uav_grid[0] * self.uav_grid[1]

    @property
    def sat_len(self) -> int:
        return 0 if self.sat_grid is None else self.sat_grid[0] * self.sat_grid[1]

    @property
    def uav_tokens(self) -> torch.Tensor:
        return self.tokens[:, : self.uav_len]

    @property
    def sat_tokens(self) -> torch.Tensor | None:
        return None if self.sat_grid is None else self.tokens[:, self.uav_len :]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.uav_grid, self.sat_grid)


class PatchEmbed(nn.Module):
    """Strided convolution that projects a grid down to the next stage.

    One set of weights serves both domains. Stage 1 consumes RGB pixels at
    the configured patch size; later stages halve the token grid.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.stride = stride
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=stride, stride=stride)
        self.norm = nn.LayerNorm(out_channels)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, feature_map: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        h, w = feature_map.shape[-2:]
        if h % self.stride or w % self.stride:
            raise DimensionMismatch(f"grid {(h, w)} not divisible by stride {self.stride}")
        out = self.proj(feature_map)
        grid = (out.shape[-2], out.shape[-1])
        return self.norm(grid_to_tokens(out)), grid


class SpatialReduction(nn.Module):
    """Strided-convolution shrink of one domain's key/value grid.

    A ratio of 1 passes tokens through untouched; larger ratios collapse
    each ratio x ratio cell into one token before the key/value projection.
    """

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        if ratio < 1:
            raise InvalidArgument(f"reduction ratio must be >= 1, got {ratio}")
        self.ratio = ratio
        if ratio > 1:
            self.reduce = nn.Conv2d(channels, channels, kernel_size=ratio, stride=ratio)
            self.norm = nn.LayerNorm(channels)
            nn.init.trunc_normal_(self.reduce.weight, std=0.02)
            nn.init.zeros_(self.reduce.bias)

    def forward(
        self, tokens: torch.Tensor, grid: tuple[int, int]
    ) -> tuple[torch.Tensor, tuple[int, int]]:
        if self.ratio == 1:
            return tokens, grid
        h, w = grid
        if h % self.ratio or w % self.ratio:
            raise DimensionMismatch(f"grid {grid} not divisible by reduction ratio {self.ratio}")
        reduced = self.reduce(tokens_to_grid(tokens, grid))
        return self.norm(grid_to_tokens(reduced)), (h // self.ratio, w // self.ratio)


class MixedAttention(nn.Module):
    """Asymmetric multi-head attention over the merged two-domain sequence.

    Queries come from every token. Keys and values come from per-domain
    spatially reduced tokens through one shared projection. UAV queries
    attend only to UAV keys while satellite queries attend to both domains,
    so UAV features never depend on the satellite image.
    """

    def __init__(self, channels: int, heads: int, sra_ratio: int):
        super().__init__()
        if channels % heads:
            raise InvalidArgument(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.scale = self.head_dim**-0.5
        self.query = nn.Linear(channels, channels)
        self.key_value = nn.Linear(channels, 2 * channels)
        self.proj = nn.Linear(channels, channels)
        self.reduce_uav = SpatialReduction(channels, sra_ratio)
        self.reduce_sat = SpatialReduction(channels, sra_ratio)
        for linear in (self.query, self.key_value):
            nn.init.trunc_normal_(linear.weight, std=0.02)
            nn.init.zeros_(linear.bias)
        # Residual branch ends at zero so every block starts as an identity.
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(1, 2)

    def _keys_values(self, tokens, grid, reducer):
        reduced, _ = reducer(tokens, grid)
        kv = self.key_value(reduced)
        batch, length, _ = kv.shape
        kv = kv.reshape(batch, length, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return kv[0], kv[1]

    def _attend(self, q, k, v):
        weights = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = weights @ v
        batch, _, length, _ = out.shape
        return out.transpose(1, 2).reshape(batch, length, self.heads * self.head_dim), weights

    def forward(self, seq: TokenSequence, return_weights: bool = False):
        q = self._split_heads(self.query(seq.tokens))
        k_uav, v_uav = self._keys_values(seq.uav_tokens, seq.uav_grid, self.reduce_uav)
        out_uav, w_uav = self._attend(q[:, :, : seq.uav_len], k_uav, v_uav)
        if seq.sat_grid is None:
            merged = out_uav
            weights = (w_uav, None)
        else:
            k_sat, v_sat = self._keys_values(seq.sat_tokens, seq.sat_grid, self.reduce_sat)
            keys = torch.cat([k_uav, k_sat], dim=2)
            values = torch.cat([v_uav, v_sat], dim=2)
            out_sat, w_sat = self._attend(q[:, :, seq.uav_len :], keys, values)
            merged = torch.cat([out_uav, out_sat], dim=1)
            weights = (w_uav, w_sat)
        out = seq.with_tokens(self.proj(merged))
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    """Two-layer MLP with GELU; the output layer starts at zero."""

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        hidden = channels * ratio
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.trunc_normal_(self.fc1.weight, std=0.02)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class PositionEncodingGenerator(nn.Module):
    """Depthwise 3x3 residual over each domain grid.

    Zero-initialized so it contributes nothing until trained; each domain
    keeps its own convolution because their grids are unrelated scenes.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.uav_conv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.sat_conv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        for conv in (self.uav_conv, self.sat_conv):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    @staticmethod
    def _residual(tokens, grid, conv):
        return tokens + grid_to_tokens(conv(tokens_to_grid(tokens, grid)))

    def forward(self, seq: TokenSequence) -> TokenSequence:
        uav = self._residual(seq.uav_tokens, seq.uav_grid, self.uav_conv)
        if seq.sat_grid is None:
            return seq.with_tokens(uav)
        sat = self._residual(seq.sat_tokens, seq.sat_grid, self.sat_conv)
        return seq.with_tokens(torch.cat([uav, sat], dim=1))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: attention residual then MLP residual."""

    def __init__(self, channels: int, heads: int, sra_ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attention = MixedAttention(channels, heads, sra_ratio)
        self.norm2 = nn.LayerNorm(channels)
        self.feed_forward = FeedForward(channels, mlp_ratio)

    def forward(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        x = x + self.attention(seq.with_tokens(self.norm1(x))).tokens
        x = x + self.feed_forward(self.norm2(x))
        return seq.with_tokens(x)


class EncoderStage(nn.Module):
    """One pyramid stage: embed, encoder blocks, position encoding.

    The position encoding generator sits after the first block, matching
    the conditional position encoding placement of the baseline network.
    """

    def __init__(
        self,
        in_channels: int,
        channels: int,
        depth: int,
        heads: int,
        sra_ratio: int,
        mlp_ratio: int,
        stride: int,
    ):
        super().__init__()
        self.embed = PatchEmbed(in_channels, channels, stride)
        self.blocks = nn.ModuleList(
            EncoderBlock(channels, heads, sra_ratio, mlp_ratio) for _ in range(depth)
        )
        self.peg = PositionEncodingGenerator(channels)

    def forward(self, uav_map: torch.Tensor, sat_map: torch.Tensor | None):
        uav_tokens, uav_grid = self.embed(uav_map)
        if sat_map is None:
            seq = TokenSequence(uav_tokens, uav_grid, None)
        else:
            sat_tokens, sat_grid = self.embed(sat_map)
            seq = TokenSequence(torch.cat([uav_tokens, sat_tokens], dim=1), uav_grid, sat_grid)
        for index, block in enumerate(self.blocks):
            seq = block(seq)
            if index == 0:
                seq = self.peg(seq)
        uav_out = tokens_to_grid(seq.uav_tokens, seq.uav_grid)
        sat_out = None if seq.sat_grid is None else tokens_to_grid(seq.sat_tokens, seq.sat_grid)
        return uav_out, sat_out


@dataclass
class StageOutputs:
    """Per-stage feature maps for each domain, shallowest stage first."""

    uav: list[torch.Tensor]
    sat: list[torch.Tensor] | None


class OneStreamBackbone(nn.Module):
    """Three-stage shared encoder producing pyramid features for both domains.

    The satellite input is optional; passing only the UAV image runs the
    self-contained UAV path and leaves the satellite outputs as None.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        stages = []
        in_channels = 3
        for i in range(self.config.num_stages):
            stages.append(
                EncoderStage(
                    in_channels=in_channels,
                    channels=self.config.stage_channels[i],
                    depth=self.config.stage_depths[i],
                    heads=self.config.stage_heads[i],
                    sra_ratio=self.config.sra_ratios[i],
                    mlp_ratio=self.config.mlp_ratios[i],
                    stride=self.config.patch_size if i == 0 else 2,
                )
            )
            in_channels = self.config.stage_channels[i]
        self.stages = nn.ModuleList(stages)

    def _check_input(self, name: str, image: torch.Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionMismatch(f"{name} input must be (B, 3, H, W), got {tuple(image.shape)}")
        divisor = self.config.patch_size * 2 ** (self.config.num_stages - 1)
        h, w = image.shape[-2:]
        if h % divisor or w % divisor:
            raise DimensionMismatch(f"{name} input {h}x{w} must be divisible by {divisor}")

    def forward(self, uav: torch.Tensor, sat: torch.Tensor | None = None) -> StageOutputs:
        self._check_input("uav", uav)
        if sat is not None:
            self._check_input("sat", sat)
        uav_maps: list[torch.Tensor] = []
        sat_maps: list[torch.Tensor] | None = [] if sat is not None else None
        uav_map, sat_map = uav, sat
        for stage in self.stages:
            uav_map, sat_map = stage(uav_map, sat_map)
            uav_maps.append(uav_map)
            if sat_maps is not None:
                sat_maps.append(sat_map)
        return StageOutputs(uav=uav_maps, sat=sat_maps)
