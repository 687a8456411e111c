import numpy as np
import pytest
import torch

from osfpi.backbone import OneStreamBackbone
from osfpi.config import BackboneConfig, FusionConfig
from osfpi.errors import DimensionMismatch, InvalidArgument
from osfpi.fusion import (
    AtrousContext,
    FeaturePyramid,
    GeoLocalizer,
    GroupCorrelation,
    PredictionHead,
    build_prediction,
    heatmap_argmax,
)

MINI_BACKBONE = BackboneConfig(
    stage_channels=[16, 32, 64],
    stage_depths=[1, 1, 2],
    stage_heads=[1, 2, 4],
    sra_ratios=[4, 2, 1],
    mlp_ratios=[4, 4, 4],
    uav_input=(32, 32),
    sat_input=(128, 128),
)
MINI_FUSION = FusionConfig(fpn_channels=16, atrous_rates=[2, 4, 8], heatmap_size=128)


# ------------------------------------------------------------- pyramid

def set_identity_1x1(conv):
    with torch.no_grad():
        conv.weight.zero_()
        for c in range(conv.weight.shape[0]):
            conv.weight[c, c, 0, 0] = 1.0
        conv.bias.zero_()


def set_identity_3x3(conv):
    with torch.no_grad():
        conv.weight.zero_()
        for c in range(conv.weight.shape[0]):
            conv.weight[c, c, 1, 1] = 1.0
        conv.bias.zero_()


def test_pyramid_sums_upsampled_constants():
    # Identity laterals and smoothing on a constant 1-channel ladder: the
    # output must be the plain sum of the three constants everywhere.
    pyramid = FeaturePyramid([1, 1, 1], 1)
    for lateral in pyramid.laterals:
        set_identity_1x1(lateral)
    set_identity_3x3(pyramid.smooth)
    maps = [
        torch.full((1, 1, 4, 4), 1.0),
        torch.full((1, 1, 2, 2), 10.0),
        torch.full((1, 1, 1, 1), 100.0),
    ]
    out = pyramid(maps)
    assert out.shape == (1, 1, 4, 4)
    assert torch.allclose(out, torch.full((1, 1, 4, 4), 111.0))


def test_pyramid_upsample_is_nearest():
    pyramid = FeaturePyramid([1, 1], 1)
    for lateral in pyramid.laterals:
        set_identity_1x1(lateral)
    set_identity_3x3(pyramid.smooth)
    fine = torch.zeros(1, 1, 4, 4)
    coarse = torch.arange(4.0).reshape(1, 1, 2, 2)
    out = pyramid([fine, coarse])
    expected = coarse.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    assert torch.equal(out, expected)


def test_pyramid_rejects_broken_ladder():
    pyramid = FeaturePyramid([1, 1, 1], 1)
    maps = [torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 1, 1)]
    with pytest.raises(DimensionMismatch):
        pyramid(maps)
    with pytest.raises(DimensionMismatch):
        pyramid([torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2)])


def test_pyramid_output_channels(torch_gen):
    pyramid = FeaturePyramid([16, 32, 64], 16)
    maps = [
        torch.randn(2, 16, 32, 32, generator=torch_gen),
        torch.randn(2, 32, 16, 16, generator=torch_gen),
        torch.randn(2, 64, 8, 8, generator=torch_gen),
    ]
    assert pyramid(maps).shape == (2, 16, 32, 32)


# ------------------------------------------------------------- atrous

def test_atrous_preserves_grid(torch_gen):
    context = AtrousContext(16, [2, 4, 8])
    x = torch.randn(2, 16, 32, 32, generator=torch_gen)
    assert context(x).shape == (2, 16, 32, 32)


def test_atrous_dilation_reach():
    # With an identity fuse and a single rate-4 branch reading only the
    # top-left kernel tap, the branch output at (4, 4) sees input (0, 0).
    context = AtrousContext(1, [4])
    with torch.no_grad():
        context.branches[0].weight.zero_()
        context.branches[0].weight[0, 0, 0, 0] = 1.0
        context.branches[0].bias.zero_()
        set_identity_3x3(context.fuse)
    x = torch.zeros(1, 1, 16, 16)
    x[0, 0, 0, 0] = 5.0
    with torch.no_grad():
        out = context(x)
    assert out[0, 0, 4, 4].item() == pytest.approx(5.0)
    assert out.abs().sum().item() == pytest.approx(5.0)


# ------------------------------------------------------------- correlation

def correlation_oracle(kernel: np.ndarray, feature: np.ndarray, groups: int) -> np.ndarray:
    """Brute-force grouped sliding dot product with asymmetric same padding."""
    batch, channels, kh, kw = kernel.shape
    fh, fw = feature.shape[-2:]
    pad_top, pad_bottom = (kh - 1) // 2, kh // 2
    pad_left, pad_right = (kw - 1) // 2, kw // 2
    padded = np.zeros((batch, channels, fh + kh - 1, fw + kw - 1))
    padded[:, :, pad_top : pad_top + fh, pad_left : pad_left + fw] = feature
    per_group = channels // groups
    out = np.zeros((batch, groups, fh, fw))
    for b in range(batch):
        for g in range(groups):
            cs = slice(g * per_group, (g + 1) * per_group)
            for i in range(fh):
                for j in range(fw):
                    window = padded[b, cs, i : i + kh, j : j + kw]
                    out[b, g, i, j] = (kernel[b, cs] * window).sum()
    return out


def test_correlation_matches_bruteforce_depthwise(rng):
    corr = GroupCorrelation(channels=4, groups=4)
    set_identity_1x1_groups(corr.project)
    kernel = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    feature = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    got = corr(torch.tensor(kernel), torch.tensor(feature))
    expected = correlation_oracle(kernel, feature, groups=4).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got.detach().numpy(), expected, atol=1e-4)


def set_identity_1x1_groups(conv):
    # 1x1 projection summing all groups with unit weight.
    with torch.no_grad():
        conv.weight.fill_(1.0)
        conv.bias.zero_()


def test_correlation_even_kernel_padding(rng):
    # Even kernels put the extra padding row/column on the bottom/right.
    corr = GroupCorrelation(channels=1, groups=1)
    set_identity_1x1_groups(corr.project)
    kernel = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
    feature = rng.normal(size=(1, 1, 9, 9)).astype(np.float32)
    got = corr(torch.tensor(kernel), torch.tensor(feature))
    expected = correlation_oracle(kernel, feature, groups=1)
    assert got.shape == (1, 1, 9, 9)
    np.testing.assert_allclose(got.detach().numpy(), expected, atol=1e-4)


def test_correlation_peak_at_embedded_copy(rng):
    # An exact copy of the kernel inside a zero background peaks at the
    # embedding position plus the kernel's top-left padding offset.
    kernel = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
    feature = np.zeros((1, 1, 32, 32), dtype=np.float32)
    r0, c0 = 11, 17
    feature[0, 0, r0 : r0 + 8, c0 : c0 + 8] = kernel[0, 0]
    corr = GroupCorrelation(channels=1, groups=1)
    response = corr.raw_response(torch.tensor(kernel), torch.tensor(feature))
    flat = response[0, 0].argmax()
    peak = (int(flat) // 32, int(flat) % 32)
    assert peak == (r0 + 3, c0 + 3)
    oracle = correlation_oracle(kernel, feature, groups=1)
    np.testing.assert_allclose(response[0, 0].numpy(), oracle[0, 0], atol=1e-4)


def test_correlation_translation_equivariance(rng):
    kernel = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    corr = GroupCorrelation(channels=1, groups=1)
    peaks = []
    for r0, c0 in [(6, 6), (9, 13)]:
        feature = np.zeros((1, 1, 24, 24), dtype=np.float32)
        feature[0, 0, r0 : r0 + 5, c0 : c0 + 5] = kernel[0, 0]
        response = corr.raw_response(torch.tensor(kernel), torch.tensor(feature))
        flat = int(response[0, 0].argmax())
        peaks.append((flat // 24, flat % 24))
    assert peaks[1][0] - peaks[0][0] == 3
    assert peaks[1][1] - peaks[0][1] == 7


def test_correlation_batch_rows_are_independent(rng):
    corr = GroupCorrelation(channels=4, groups=2)
    kernel = rng.normal(size=(3, 4, 3, 3)).astype(np.float32)
    feature = rng.normal(size=(3, 4, 10, 10)).astype(np.float32)
    batched = corr(torch.tensor(kernel), torch.tensor(feature))
    for b in range(3):
        single = corr(torch.tensor(kernel[b : b + 1]), torch.tensor(feature[b : b + 1]))
        np.testing.assert_allclose(batched[b].detach().numpy(), single[0].detach().numpy(), atol=1e-6)


def test_correlation_group_structure(rng):
    # Select one group through the projection and compare it to the
    # brute-force response of that group alone.
    corr = GroupCorrelation(channels=4, groups=2)
    with torch.no_grad():
        corr.project.weight.zero_()
        corr.project.weight[0, 1] = 1.0
        corr.project.bias.zero_()
    kernel = rng.normal(size=(1, 4, 3, 3)).astype(np.float32)
    feature = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    got = corr(torch.tensor(kernel), torch.tensor(feature))
    expected = correlation_oracle(kernel, feature, groups=2)[:, 1:2]
    np.testing.assert_allclose(got.detach().numpy(), expected, atol=1e-4)


def test_correlation_zero_kernel_gives_bias_only(rng):
    corr = GroupCorrelation(channels=2, groups=1)
    feature = torch.tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float32))
    out = corr(torch.zeros(1, 2, 4, 4), feature)
    assert torch.allclose(out, corr.project.bias.reshape(1, 1, 1, 1).expand_as(out))


def test_correlation_validates_shapes():
    corr = GroupCorrelation(channels=4, groups=2)
    with pytest.raises(DimensionMismatch):
        corr(torch.zeros(1, 4, 3, 3), torch.zeros(2, 4, 8, 8))
    with pytest.raises(DimensionMismatch):
        corr(torch.zeros(1, 2, 3, 3), torch.zeros(1, 4, 8, 8))
    with pytest.raises(InvalidArgument):
        GroupCorrelation(channels=3, groups=2)


# ------------------------------------------------------------- head

def test_head_nearest_upsample_replicates_blocks():
    head = PredictionHead(channels=1, heatmap_size=4)
    response = torch.arange(4.0).reshape(1, 1, 2, 2)
    heatmap, _ = head(response, torch.zeros(1, 1, 2, 2))
    expected = response[:, 0].repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
    assert torch.equal(heatmap, expected)


def test_head_offsets_start_at_zero(torch_gen):
    head = PredictionHead(channels=8, heatmap_size=32)
    context = torch.randn(2, 8, 8, 8, generator=torch_gen)
    _, offsets = head(torch.randn(2, 1, 8, 8, generator=torch_gen), context)
    assert offsets.shape == (2, 2, 32, 32)
    assert torch.all(offsets == 0)


def test_head_rejects_non_multiple_grid():
    head = PredictionHead(channels=1, heatmap_size=36)
    with pytest.raises(DimensionMismatch):
        head(torch.zeros(1, 1, 7, 7), torch.zeros(1, 1, 7, 7))


def test_head_rejects_nonpositive_clamp():
    with pytest.raises(InvalidArgument):
        PredictionHead(channels=1, heatmap_size=4, offset_clamp=0)


# ------------------------------------------------------------- prediction

def test_argmax_is_row_major_first():
    heatmap = torch.zeros(1, 4, 4)
    heatmap[0, 1, 2] = heatmap[0, 2, 1] = 7.0
    assert heatmap_argmax(heatmap)[0].tolist() == [2, 1]  # (x, y) of first max


def test_point_is_argmax_plus_offset():
    heatmap = torch.zeros(1, 128, 128)
    heatmap[0, 100, 100] = 1.0
    offsets = torch.zeros(1, 2, 128, 128)
    offsets[0, 0, 100, 100] = 0.5
    offsets[0, 1, 100, 100] = -1.2
    out = build_prediction(heatmap, offsets, offset_clamp=16.0)
    assert out.argmax[0].tolist() == [100, 100]
    assert out.point[0].tolist() == pytest.approx([100.5, 98.8])
    assert out.peak[0] == pytest.approx(1.0)


def test_zero_offsets_point_equals_argmax(torch_gen):
    heatmap = torch.randn(3, 64, 64, generator=torch_gen)
    out = build_prediction(heatmap, torch.zeros(3, 2, 64, 64), offset_clamp=16.0)
    assert torch.equal(out.point, out.argmax.to(out.point.dtype))


def test_offsets_are_clamped(torch_gen):
    heatmap = torch.randn(1, 16, 16, generator=torch_gen)
    offsets = torch.full((1, 2, 16, 16), 100.0)
    out = build_prediction(heatmap, offsets, offset_clamp=16.0)
    assert torch.all(out.offsets <= 16.0)
    assert torch.all(out.offsets >= -16.0)


def test_block_upsampled_argmax_is_centered(torch_gen):
    # A heatmap built by nearest x4 upsampling ties each 4x4 cell; the
    # reported argmax must be the cell's centered pixel: 4*coarse + 2.
    coarse = torch.randn(2, 1, 8, 8, generator=torch_gen)
    heatmap = torch.nn.functional.interpolate(coarse, scale_factor=4, mode="nearest")[:, 0]
    out = build_prediction(heatmap, torch.zeros(2, 2, 32, 32), offset_clamp=16.0, block=4)
    coarse_argmax = heatmap_argmax(coarse[:, 0].reshape(2, 8, 8))
    assert torch.equal(out.argmax, coarse_argmax * 4 + 2)
    assert torch.equal(out.peak, coarse.reshape(2, -1).max(dim=1).values)


# ------------------------------------------------------------- full model

@pytest.fixture(scope="module")
def mini_model():
    torch.manual_seed(0)
    model = GeoLocalizer(MINI_BACKBONE, MINI_FUSION, offset_clamp=16.0)
    with torch.no_grad():
        for param in model.parameters():
            if param.abs().sum() == 0:
                param.add_(torch.randn_like(param) * 0.02)
    model.eval()
    return model


def test_model_forward_shapes(mini_model, torch_gen):
    uav = torch.randn(2, 3, 32, 32, generator=torch_gen)
    sat = torch.randn(2, 3, 128, 128, generator=torch_gen)
    with torch.no_grad():
        heatmap, offsets = mini_model(uav, sat)
    assert heatmap.shape == (2, 128, 128)
    assert offsets.shape == (2, 2, 128, 128)


def test_model_forward_deterministic(mini_model, torch_gen):
    uav = torch.randn(1, 3, 32, 32, generator=torch_gen)
    sat = torch.randn(1, 3, 128, 128, generator=torch_gen)
    with torch.no_grad():
        first = mini_model(uav, sat)
        second = mini_model(uav, sat)
    assert torch.equal(first[0], second[0])
    assert torch.equal(first[1], second[1])


def test_only_finest_uav_map_enters_the_head(mini_model, torch_gen):
    # Replacing the deeper UAV pyramid levels with noise must not change
    # the output; only the finest UAV map acts as the correlation kernel.
    uav = torch.randn(1, 3, 32, 32, generator=torch_gen)
    sat = torch.randn(1, 3, 128, 128, generator=torch_gen)
    with torch.no_grad():
        features = mini_model.backbone(uav, sat)
        reference = mini_model.head(
            mini_model.correlation(
                features.uav[0], mini_model.context(mini_model.pyramid(features.sat))
            ),
            mini_model.context(mini_model.pyramid(features.sat)),
        )
        full = mini_model(uav, sat)
        features.uav[1].normal_()
        features.uav[2].normal_()
        perturbed = mini_model.head(
            mini_model.correlation(
                features.uav[0], mini_model.context(mini_model.pyramid(features.sat))
            ),
            mini_model.context(mini_model.pyramid(features.sat)),
        )
    assert torch.equal(reference[0], perturbed[0])
    assert torch.equal(reference[0], full[0])
    assert torch.equal(reference[1], full[1])


def test_model_predict_applies_block_centering(mini_model, torch_gen):
    uav = torch.randn(2, 3, 32, 32, generator=torch_gen)
    sat = torch.randn(2, 3, 128, 128, generator=torch_gen)
    out = mini_model.predict(uav, sat)
    # heatmap grid 128, response grid 32: block 4, so argmax % 4 == 2
    assert torch.all(out.argmax % 4 == 2)
    assert out.point.shape == (2, 2)
    assert torch.all(out.point >= -16.0) and torch.all(out.point < 128 + 16.0)


def test_model_rejects_channel_mismatch():
    with pytest.raises(InvalidArgument):
        GeoLocalizer(MINI_BACKBONE, FusionConfig(fpn_channels=32, atrous_rates=[2, 4], heatmap_size=128))
