import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from osfpi.errors import InvalidArgument
from osfpi.losses import (
    LossBreakdown,
    SampleLabel,
    batch_loss,
    classification_loss,
    classification_weight_map,
    hanning_window_1d,
    offset_loss,
    round_half_up,
    select_positive_samples,
    smooth_l1,
    total_loss,
    weighted_classification_loss,
)


# ---------------------------------------------------------------- rounding

def test_round_half_up_goldens():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(2.49) == 2
    assert round_half_up(-0.5) == 0
    assert round_half_up(-0.51) == -1
    assert round_half_up(3.0) == 3


# ---------------------------------------------------------------- hanning

def test_hanning_goldens_m5():
    np.testing.assert_allclose(hanning_window_1d(5), [0.0, 0.5, 1.0, 0.5, 0.0], atol=1e-12)


def test_hanning_matches_raised_cosine_formula():
    for m in (2, 3, 7, 33, 64):
        window = hanning_window_1d(m)
        expected = np.array([0.5 - 0.5 * math.cos(2 * math.pi * n / (m - 1)) for n in range(m)])
        np.testing.assert_allclose(window, expected, atol=1e-12)


def test_hanning_rejects_short_windows():
    with pytest.raises(InvalidArgument):
        hanning_window_1d(1)


def test_odd_hanning_center_tap_is_one():
    for m in (3, 5, 33):
        assert hanning_window_1d(m)[(m - 1) // 2] == pytest.approx(1.0)


# ---------------------------------------------------------------- weight map

def weight_map_oracle(label: SampleLabel, size: int) -> np.ndarray:
    """Per-pixel loop: weight = w[dy + half] * w[dx + half] when in window."""
    window = np.hanning(label.window)
    half = (label.window - 1) // 2
    cx = math.floor(label.gt_x + 0.5)
    cy = math.floor(label.gt_y + 0.5)
    out = np.zeros((size, size))
    for y in range(size):
        for x in range(size):
            dy, dx = y - cy, x - cx
            if -half <= dy <= half and -half <= dx <= half:
                out[y, x] = window[dy + half] * window[dx + half]
    return out


def test_weight_map_matches_bruteforce_interior():
    label = SampleLabel(gt_x=20.3, gt_y=17.8, window=9)
    got = classification_weight_map(label, 40)
    np.testing.assert_allclose(got, weight_map_oracle(label, 40), atol=1e-12)


def test_weight_map_matches_bruteforce_at_borders():
    for gt in [(0.0, 0.0), (0.2, 38.9), (39.0, 1.1), (38.6, 38.6)]:
        label = SampleLabel(gt_x=gt[0], gt_y=gt[1], window=11)
        got = classification_weight_map(label, 40)
        np.testing.assert_allclose(got, weight_map_oracle(label, 40), atol=1e-12)


def test_weight_map_peaks_at_rounded_truth():
    label = SampleLabel(gt_x=12.5, gt_y=7.49, window=7)
    weights = classification_weight_map(label, 32)
    assert weights[7, 13] == pytest.approx(1.0)
    assert weights.max() == pytest.approx(1.0)


def test_weight_map_rejects_truth_outside_map():
    with pytest.raises(InvalidArgument):
        classification_weight_map(SampleLabel(gt_x=31.6, gt_y=3.0, window=5), 32)


@settings(max_examples=50, deadline=None)
@given(
    gt_x=st.floats(0.0, 31.49),
    gt_y=st.floats(0.0, 31.49),
    window=st.sampled_from([3, 5, 9, 15]),
)
def test_weight_map_properties(gt_x, gt_y, window):
    label = SampleLabel(gt_x=gt_x, gt_y=gt_y, window=window)
    weights = classification_weight_map(label, 32)
    cx, cy = round_half_up(gt_x), round_half_up(gt_y)
    assert weights[cy, cx] == pytest.approx(1.0)
    assert weights.min() >= 0.0
    assert (weights > 0).sum() <= window * window


# ---------------------------------------------------------------- bce

def bce_oracle(logits: np.ndarray, weights: np.ndarray) -> float:
    """Direct float64 sum, stable logit formulation, no torch."""
    total = 0.0
    for z, w in zip(logits.reshape(-1), weights.reshape(-1)):
        t = 1.0 if w > 0 else 0.0
        pixel = max(z, 0.0) - z * t + math.log1p(math.exp(-abs(z)))
        total += (w if w > 0 else 1.0) * pixel
    return total / (weights.sum() + 1.0)


def test_weighted_bce_matches_bruteforce(rng):
    logits = rng.normal(0, 3, size=(16, 16))
    label = SampleLabel(gt_x=8.2, gt_y=5.7, window=7)
    weights = classification_weight_map(label, 16)
    got = weighted_classification_loss(
        torch.tensor(logits, dtype=torch.float64), torch.tensor(weights, dtype=torch.float64)
    )
    assert float(got) == pytest.approx(bce_oracle(logits, weights), rel=1e-12)


def test_classification_loss_uses_plus_one_normalizer():
    # All-zero logits: every pixel contributes log(2) weighted by its weight
    # (positives) or 1 (negatives); denominator is weight sum + 1.
    size, window = 16, 5
    label = SampleLabel(gt_x=8.0, gt_y=8.0, window=window)
    weights = classification_weight_map(label, size)
    n_negative = (weights == 0).sum()
    expected = math.log(2) * (weights.sum() + n_negative) / (weights.sum() + 1)
    got = classification_loss(torch.zeros(size, size, dtype=torch.float64), label)
    assert float(got) == pytest.approx(expected, rel=1e-12)


def test_classification_loss_rejects_nonfinite():
    heatmap = torch.zeros(8, 8)
    heatmap[3, 3] = float("nan")
    with pytest.raises(InvalidArgument):
        classification_loss(heatmap, SampleLabel(gt_x=4, gt_y=4, window=3))


def test_classification_loss_rejects_rectangular():
    with pytest.raises(InvalidArgument):
        classification_loss(torch.zeros(8, 10), SampleLabel(gt_x=4, gt_y=4))


# ---------------------------------------------------------------- positives

def positives_oracle(heatmap: np.ndarray, label: SampleLabel) -> set[tuple[int, int]]:
    """Sort-and-filter reference: stable descending sort admits row-major ties."""
    height, width = heatmap.shape
    flat = heatmap.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    top = set(order[: min(label.topk, flat.size)].tolist())
    cx, cy = round_half_up(label.gt_x), round_half_up(label.gt_y)
    half = (label.window - 1) // 2
    result = set()
    for y in range(max(0, cy - half), min(height, cy + half + 1)):
        for x in range(max(0, cx - half), min(width, cx + half + 1)):
            if y * width + x in top:
                result.add((x, y))
    return result


def test_select_positive_samples_matches_oracle(rng):
    for _ in range(50):
        heatmap = rng.normal(size=(64, 64))
        label = SampleLabel(
            gt_x=float(rng.uniform(0, 63.4)),
            gt_y=float(rng.uniform(0, 63.4)),
            window=int(rng.choice([3, 9, 33])),
            topk=int(rng.choice([10, 300, 4096])),
        )
        got = select_positive_samples(heatmap, label)
        assert set(map(tuple, got.tolist())) == positives_oracle(heatmap, label)


def test_select_positive_samples_tie_break_is_row_major():
    # Constant heatmap: every pixel ties, so the top-k must be the first k
    # pixels in row-major order.
    heatmap = np.ones((8, 8))
    label = SampleLabel(gt_x=3.0, gt_y=3.0, window=15, topk=10)
    got = select_positive_samples(heatmap, label)
    expected = [(x, y) for y in range(8) for x in range(8)][:10]
    # window covers the whole map, so the intersection is exactly the top 10
    assert [tuple(p) for p in got.tolist()] == expected


def test_select_positive_samples_sorted_row_major(rng):
    heatmap = rng.normal(size=(32, 32))
    got = select_positive_samples(heatmap, SampleLabel(gt_x=15.0, gt_y=15.0, window=9, topk=50))
    keys = [y * 32 + x for x, y in got.tolist()]
    assert keys == sorted(keys)
    assert got.dtype == np.int64 and got.shape[1] == 2


def test_select_positive_samples_can_be_empty():
    heatmap = np.zeros((16, 16))
    heatmap[12:, 12:] = 5.0  # all mass far from the truth window
    got = select_positive_samples(heatmap, SampleLabel(gt_x=2.0, gt_y=2.0, window=3, topk=4))
    assert got.shape == (0, 2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), topk=st.integers(1, 300))
def test_select_positive_samples_size_bound(seed, topk):
    generator = np.random.default_rng(seed)
    heatmap = generator.normal(size=(24, 24))
    label = SampleLabel(gt_x=11.0, gt_y=11.0, window=9, topk=topk)
    got = select_positive_samples(heatmap, label)
    assert len(got) <= min(topk, 81)
    cx, cy = 11, 11
    for x, y in got.tolist():
        assert abs(x - cx) <= 4 and abs(y - cy) <= 4


# ---------------------------------------------------------------- smooth l1

def test_smooth_l1_goldens():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(0.5) == pytest.approx(0.125)
    assert smooth_l1(1.0) == pytest.approx(0.5)
    assert smooth_l1(2.0) == pytest.approx(1.5)
    assert smooth_l1(-3.0) == pytest.approx(2.5)


def test_smooth_l1_continuous_at_knee():
    below = smooth_l1(1.0 - 1e-9)
    above = smooth_l1(1.0 + 1e-9)
    assert abs(below - above) < 1e-8


def test_smooth_l1_tensor_matches_scalar(rng):
    values = rng.uniform(-4, 4, size=37)
    got = smooth_l1(torch.tensor(values))
    expected = [smooth_l1(float(v)) for v in values]
    np.testing.assert_allclose(got.numpy(), expected, rtol=1e-12)


# ---------------------------------------------------------------- offsets

def offset_loss_oracle(offsets: np.ndarray, heatmap: np.ndarray, label: SampleLabel) -> float:
    positives = positives_oracle(heatmap, label)
    if not positives:
        return 0.0
    terms = []
    for x, y in sorted(positives):
        terms.append(smooth_l1(offsets[0, y, x] - (label.gt_x - x)))
        terms.append(smooth_l1(offsets[1, y, x] - (label.gt_y - y)))
    return float(np.mean(terms))


def test_offset_loss_matches_bruteforce(rng):
    for _ in range(20):
        heatmap = rng.normal(size=(24, 24))
        offsets = rng.normal(0, 2, size=(2, 24, 24))
        label = SampleLabel(gt_x=10.4, gt_y=13.8, window=9, topk=60)
        got = offset_loss(
            torch.tensor(offsets, dtype=torch.float64),
            torch.tensor(heatmap, dtype=torch.float64),
            label,
        )
        assert float(got) == pytest.approx(offset_loss_oracle(offsets, heatmap, label), rel=1e-12)


def test_offset_targets_are_unnormalized_pixel_residuals():
    # One positive pixel at (3, 2) with a perfect prediction: loss is zero.
    heatmap = np.full((8, 8), -10.0)
    heatmap[2, 3] = 10.0
    label = SampleLabel(gt_x=3.4, gt_y=1.7, window=3, topk=1)
    offsets = torch.zeros(2, 8, 8, dtype=torch.float64)
    offsets[0, 2, 3] = 3.4 - 3
    offsets[1, 2, 3] = 1.7 - 2
    assert float(offset_loss(offsets, torch.tensor(heatmap), label)) == pytest.approx(0.0)
    # Zero prediction instead: residuals are the raw pixel distances.
    zero = offset_loss(torch.zeros(2, 8, 8, dtype=torch.float64), torch.tensor(heatmap), label)
    expected = (smooth_l1(0.4) + smooth_l1(-0.3)) / 2
    assert float(zero) == pytest.approx(expected)


def test_offset_loss_empty_positive_set_keeps_graph():
    heatmap = np.zeros((16, 16))
    heatmap[14, 14] = 3.0
    offsets = torch.randn(2, 16, 16, dtype=torch.float64, requires_grad=True)
    loss = offset_loss(offsets, torch.tensor(heatmap), SampleLabel(gt_x=2, gt_y=2, window=3, topk=1))
    assert float(loss.detach()) == 0.0
    loss.backward()
    assert offsets.grad is not None
    assert torch.all(offsets.grad == 0)


def test_offset_selection_does_not_backprop_into_heatmap():
    heatmap = torch.randn(12, 12, dtype=torch.float64, requires_grad=True)
    offsets = torch.randn(2, 12, 12, dtype=torch.float64, requires_grad=True)
    loss = offset_loss(offsets, heatmap, SampleLabel(gt_x=6.0, gt_y=6.0, window=5, topk=20))
    loss.backward()
    assert heatmap.grad is None
    assert offsets.grad is not None


def test_offset_loss_rejects_bad_shape():
    with pytest.raises(InvalidArgument):
        offset_loss(torch.zeros(3, 8, 8), torch.zeros(8, 8), SampleLabel(gt_x=4, gt_y=4))


# ---------------------------------------------------------------- totals

def test_total_is_sum_of_parts(rng):
    heatmap = torch.tensor(rng.normal(size=(16, 16)))
    offsets = torch.tensor(rng.normal(size=(2, 16, 16)))
    label = SampleLabel(gt_x=7.2, gt_y=9.9, window=7, topk=30)
    breakdown = total_loss(heatmap, offsets, label)
    assert float(breakdown.total) == pytest.approx(
        float(breakdown.classification) + float(breakdown.offset), rel=1e-12
    )


def test_breakdown_total_is_a_property():
    breakdown = LossBreakdown(classification=torch.tensor(2.0), offset=torch.tensor(0.5))
    assert float(breakdown.total) == 2.5


def test_batch_loss_averages_per_sample(rng):
    heatmaps = torch.tensor(rng.normal(size=(3, 16, 16)))
    offsets = torch.tensor(rng.normal(size=(3, 2, 16, 16)))
    labels = [SampleLabel(gt_x=4.0 + i, gt_y=5.0 + i, window=5, topk=20) for i in range(3)]
    batch = batch_loss(heatmaps, offsets, labels)
    singles = [total_loss(heatmaps[i], offsets[i], labels[i]) for i in range(3)]
    assert float(batch.classification) == pytest.approx(
        np.mean([float(s.classification) for s in singles]), rel=1e-12
    )
    assert float(batch.offset) == pytest.approx(
        np.mean([float(s.offset) for s in singles]), rel=1e-12
    )


def test_batch_loss_rejects_size_mismatch():
    with pytest.raises(InvalidArgument):
        batch_loss(torch.zeros(2, 8, 8), torch.zeros(3, 2, 8, 8), [SampleLabel(1, 1)] * 2)


# ---------------------------------------------------------- finite differences

def test_loss_gradients_match_central_differences(rng):
    """float64 FD check of d(total)/d(heatmap) and d(total)/d(offsets)."""
    size = 8
    label = SampleLabel(gt_x=3.6, gt_y=4.2, window=5, topk=12)
    heatmap0 = rng.normal(0, 2, size=(size, size))
    offsets0 = rng.normal(0, 1, size=(2, size, size))

    heatmap = torch.tensor(heatmap0, requires_grad=True)
    offsets = torch.tensor(offsets0, requires_grad=True)
    total_loss(heatmap, offsets, label).total.backward()

    def f(hm, off):
        return float(total_loss(torch.tensor(hm), torch.tensor(off), label).total)

    eps = 1e-6
    for _ in range(12):
        y, x = rng.integers(0, size, size=2)
        bumped_up, bumped_dn = heatmap0.copy(), heatmap0.copy()
        bumped_up[y, x] += eps
        bumped_dn[y, x] -= eps
        fd = (f(bumped_up, offsets0) - f(bumped_dn, offsets0)) / (2 * eps)
        analytic = float(heatmap.grad[y, x])
        assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-9)
    for _ in range(12):
        c, y, x = rng.integers(0, 2), *rng.integers(0, size, size=2)
        bumped_up, bumped_dn = offsets0.copy(), offsets0.copy()
        bumped_up[c, y, x] += eps
        bumped_dn[c, y, x] -= eps
        fd = (f(heatmap0, bumped_up) - f(heatmap0, bumped_dn)) / (2 * eps)
        analytic = float(offsets.grad[c, y, x])
        assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-9)
