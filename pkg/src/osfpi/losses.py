"""Training objective: Hanning-weighted classification plus smooth-L1 offsets.

The classification branch is supervised densely on the full heatmap with a
Hanning-shaped weight bump around the ground truth. The offset branch is
supervised only on positive pixels, selected as the intersection of a
window around the ground truth with the globally top-scoring pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument


def round_half_up(value: float) -> int:
    """Round to the nearest integer with .5 going up, independent of parity."""
    return math.floor(value + 0.5)


@dataclass
class SampleLabel:
    """Ground-truth position and positive-sample knobs for one pair.

    Coordinates are satellite-heatmap pixels. ``window`` is the side of the
    positive rectangle, ``topk`` caps how many pixels may count as
    regression positives.
    """

    gt_x: float
    gt_y: float
    window: int = 33
    topk: int = 300

    def __post_init__(self):
        if self.gt_x < 0 or self.gt_y < 0:
            raise InvalidArgument(f"ground truth must be nonnegative, got ({self.gt_x}, {self.gt_y})")
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidArgument(f"window must be a positive odd integer, got {self.window}")
        if self.topk < 1:
            raise InvalidArgument(f"topk must be >= 1, got {self.topk}")


@dataclass
class LossBreakdown:
    classification: torch.Tensor
    offset: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.classification + self.offset


def hanning_window_1d(length: int) -> np.ndarray:
    """Raised-cosine window w[n] = 0.5 - 0.5 cos(2 pi n / (length - 1))."""
    if length < 2:
        raise InvalidArgument(f"window length must be >= 2, got {length}")
    return np.hanning(length)


def _window_crop(center: int, half: int, size: int) -> tuple[int, int, int]:
    """Clip [center-half, center+half] to [0, size); returns lo, hi, window offset."""
    lo = max(0, center - half)
    hi = min(size, center + half + 1)
    return lo, hi, lo - (center - half)


def classification_weight_map(label: SampleLabel, size: int) -> np.ndarray:
    """Outer product of two 1D Hanning windows centered at the rounded truth.

    The window is cropped at the image border; everything outside is zero.
    The nonzero support is the positive region of the classification loss.
    """
    center_x = round_half_up(label.gt_x)
    center_y = round_half_up(label.gt_y)
    if not (0 <= center_x < size and 0 <= center_y < size):
        raise InvalidArgument(
            f"rounded ground truth ({center_x}, {center_y}) outside a {size}x{size} map"
        )
    window = hanning_window_1d(label.window)
    half = (label.window - 1) // 2
    x_lo, x_hi, x_off = _window_crop(center_x, half, size)
    y_lo, y_hi, y_off = _window_crop(center_y, half, size)
    weights = np.zeros((size, size))
    weights[y_lo:y_hi, x_lo:x_hi] = np.outer(
        window[y_off : y_off + (y_hi - y_lo)], window[x_off : x_off + (x_hi - x_lo)]
    )
    return weights


def weighted_classification_loss(heatmap: torch.Tensor, weight_map: torch.Tensor) -> torch.Tensor:
    """Dense binary cross-entropy against the weight map's support.

    Positive pixels (weight > 0) are weighted by the map, negatives by 1,
    and the sum is normalized by (total positive weight + 1).
    """
    if not torch.isfinite(heatmap).all():
        raise InvalidArgument("heatmap logits must be finite")
    if heatmap.shape != weight_map.shape:
        raise InvalidArgument(
            f"heatmap shape {tuple(heatmap.shape)} != weight map shape {tuple(weight_map.shape)}"
        )
    positive = weight_map > 0
    target = positive.to(heatmap.dtype)
    pixel_weight = torch.where(positive, weight_map, torch.ones_like(weight_map))
    bce = F.binary_cross_entropy_with_logits(heatmap, target, reduction="none")
    normalizer = weight_map.sum() + 1
    return (pixel_weight * bce).sum() / normalizer


def classification_loss(heatmap: torch.Tensor, label: SampleLabel) -> torch.Tensor:
    if heatmap.ndim != 2 or heatmap.shape[0] != heatmap.shape[1]:
        raise InvalidArgument(f"heatmap must be square (H, H), got {tuple(heatmap.shape)}")
    weights = classification_weight_map(label, heatmap.shape[0])
    weight_map = torch.as_tensor(weights, dtype=heatmap.dtype, device=heatmap.device)
    return weighted_classification_loss(heatmap, weight_map)


def select_positive_samples(heatmap: np.ndarray, label: SampleLabel) -> np.ndarray:
    """Pixels inside the truth rectangle whose score ranks in the global top k.

    Ties at the rank boundary are admitted in row-major order so the result
    is deterministic. Returns an (n, 2) integer array of (x, y) coordinates
    sorted row-major; n <= min(window**2, topk).
    """
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2:
        raise InvalidArgument(f"heatmap must be 2D, got shape {heatmap.shape}")
    height, width = heatmap.shape
    flat = heatmap.reshape(-1)
    k = min(label.topk, flat.size)
    kth_value = np.partition(flat, flat.size - k)[flat.size - k]
    in_top = flat > kth_value
    need = k - int(in_top.sum())
    in_top[np.flatnonzero(flat == kth_value)[:need]] = True

    center_x = round_half_up(label.gt_x)
    center_y = round_half_up(label.gt_y)
    half = (label.window - 1) // 2
    x_lo, x_hi, _ = _window_crop(center_x, half, width)
    y_lo, y_hi, _ = _window_crop(center_y, half, height)
    rectangle = np.zeros_like(in_top.reshape(height, width))
    rectangle[y_lo:y_hi, x_lo:x_hi] = True

    ys, xs = np.nonzero(in_top.reshape(height, width) & rectangle)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def smooth_l1(x):
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside."""
    if isinstance(x, torch.Tensor):
        magnitude = x.abs()
        return torch.where(magnitude < 1, 0.5 * x * x, magnitude - 0.5)
    magnitude = abs(x)
    return 0.5 * x * x if magnitude < 1 else magnitude - 0.5


def offset_loss(offsets: torch.Tensor, heatmap: torch.Tensor, label: SampleLabel) -> torch.Tensor:
    """Mean smooth-L1 between predicted corrections and sub-pixel residuals.

    Positive pixels come from the detached heatmap, so no gradient flows
    into the classification branch through the selection. An empty positive
    set yields an exact zero that still participates in the graph.
    """
    if offsets.ndim != 3 or offsets.shape[0] != 2:
        raise InvalidArgument(f"offsets must be (2, H, W), got {tuple(offsets.shape)}")
    positives = select_positive_samples(heatmap.detach().cpu().numpy(), label)
    if len(positives) == 0:
        return offsets.sum() * 0
    xs = torch.as_tensor(positives[:, 0], device=offsets.device)
    ys = torch.as_tensor(positives[:, 1], device=offsets.device)
    predicted = offsets[:, ys, xs]
    targets = torch.stack(
        [label.gt_x - xs.to(offsets.dtype), label.gt_y - ys.to(offsets.dtype)]
    )
    return smooth_l1(predicted - targets).mean()


def total_loss(heatmap: torch.Tensor, offsets: torch.Tensor, label: SampleLabel) -> LossBreakdown:
    """Unweighted sum of the classification and offset terms for one sample."""
    return LossBreakdown(
        classification=classification_loss(heatmap, label),
        offset=offset_loss(offsets, heatmap, label),
    )


def batch_loss(
    heatmaps: torch.Tensor, offsets: torch.Tensor, labels: list[SampleLabel]
) -> LossBreakdown:
    """Per-sample losses averaged over the batch."""
    if heatmaps.shape[0] != offsets.shape[0] or heatmaps.shape[0] != len(labels):
        raise InvalidArgument(
            f"batch sizes disagree: {heatmaps.shape[0]} heatmaps, "
            f"{offsets.shape[0]} offset maps, {len(labels)} labels"
        )
    parts = [total_loss(heatmaps[i], offsets[i], labels[i]) for i in range(len(labels))]
    n = len(parts)
    return LossBreakdown(
        classification=sum(p.classification for p in parts) / n,
        offset=sum(p.offset for p in parts) / n,
    )
