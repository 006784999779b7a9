"""Tests for the shared-weight stereo encoder and its correlation fusion."""

import pytest
import torch

from stereoseg.correlation import CameraIntrinsics, CorrelationConfig
from stereoseg.encoder import EncoderConfig, StereoEncoder


def toy_encoder(use_axial=False):
    cfg = EncoderConfig(
        stage_widths=(16, 32, 64, 128),
        reduction_ratio=2,
        d_model=64,
        use_axial_attention=use_axial,
    )
    corr1 = CorrelationConfig.from_step_size(4.0, 1.0, 4)
    corr2 = CorrelationConfig.from_step_size(2.0, 0.5, 8)
    return StereoEncoder(cfg, corr1, corr2), cfg, corr1, corr2


class TestShapes:
    def test_reference_scale_skip_resolution(self):
        # 480x640 input with stage strides (4,2,2,2): the first correlation
        # sees a 120x160 grid
        cfg = EncoderConfig(
            stage_widths=(16, 32, 64, 128), reduction_ratio=2, d_model=64
        )
        assert cfg.corr1_stride == 4 and cfg.corr2_stride == 8
        assert (480 // cfg.corr1_stride, 640 // cfg.corr1_stride) == (120, 160)

    def test_toy_output_shapes(self):
        encoder, cfg, corr1, corr2 = toy_encoder()
        left = torch.randn(1, 3, 64, 96)
        right = torch.randn(1, 3, 64, 96)
        out = encoder(left, right)
        assert out.deep.values.shape == (1, 64, 2, 3)
        assert out.deep.stride == 32
        assert out.skip1.values.shape == (1, 16 // 2 + corr1.channels, 16, 24)
        assert out.skip1.stride == 4
        assert out.skip2.values.shape == (1, 32 // 2 + corr2.channels, 8, 12)
        assert out.skip2.stride == 8

    def test_indivisible_input_rejected(self):
        encoder, *_ = toy_encoder()
        with pytest.raises(ValueError, match="divisible"):
            encoder(torch.randn(1, 3, 60, 96), torch.randn(1, 3, 60, 96))

    def test_shape_mismatch_rejected(self):
        encoder, *_ = toy_encoder()
        with pytest.raises(ValueError, match="same shape"):
            encoder(torch.randn(1, 3, 64, 96), torch.randn(1, 3, 64, 64))

    def test_correlation_stride_mismatch_rejected(self):
        cfg = EncoderConfig(stage_widths=(16, 32, 64, 128), reduction_ratio=2, d_model=64)
        good = CorrelationConfig.from_step_size(4.0, 1.0, 4)
        bad = CorrelationConfig.from_step_size(4.0, 1.0, 16)
        with pytest.raises(ValueError, match="corr2"):
            StereoEncoder(cfg, good, bad)


class TestWeightSharing:
    def test_identical_images_self_correlate(self):
        torch.manual_seed(0)
        encoder, cfg, corr1, corr2 = toy_encoder()
        encoder.eval()
        image = torch.rand(1, 3, 64, 96)
        with torch.no_grad():
            l1 = encoder.stage1(image)
            l1r = encoder.reduce1(l1)
            c1 = encoder.corr1(l1r, l1r)
            out = encoder(image, image)
        # channel 0 of each correlation equals the squared norm of the
        # reduced left feature (both branches share every weight)
        squared = (l1r * l1r).sum(dim=1)
        skip1_corr = out.skip1.values[:, 16 // 2 :]
        assert torch.allclose(skip1_corr[:, 0], squared, atol=1e-5)
        assert torch.equal(skip1_corr, c1)

        l2r = encoder.reduce2(encoder.stage2(l1))
        squared2 = (l2r * l2r).sum(dim=1)
        skip2_corr = out.skip2.values[:, 32 // 2 :]
        assert torch.allclose(skip2_corr[:, 0], squared2, atol=1e-5)

    def test_swap_changes_only_correlation_direction(self):
        torch.manual_seed(1)
        encoder, *_ = toy_encoder()
        encoder.eval()
        left = torch.rand(1, 3, 64, 96)
        right = torch.rand(1, 3, 64, 96)
        with torch.no_grad():
            # pre-correlation branch features do not depend on the side an
            # image is fed into
            for stage in (encoder.stage1,):
                assert torch.equal(stage(left), stage(left))
            l1 = encoder.stage1(left)
            r1 = encoder.stage1(right)
            swapped_l1 = encoder.stage1(right)
            assert torch.equal(r1, swapped_l1)
            del l1


class TestAxialOption:
    def test_axial_stages_forward(self):
        torch.manual_seed(2)
        encoder, *_ = toy_encoder(use_axial=True)
        out = encoder(torch.randn(1, 3, 64, 96), torch.randn(1, 3, 64, 96))
        assert out.deep.values.shape == (1, 64, 2, 3)

    def test_axial_width_divisibility_checked(self):
        with pytest.raises(ValueError, match="axial"):
            EncoderConfig(
                stage_widths=(16, 32, 30, 128),
                reduction_ratio=2,
                d_model=64,
                use_axial_attention=True,
                axial_heads=4,
            )


def test_deterministic_shapes_function_of_input_size():
    encoder, *_ = toy_encoder()
    for h, w in ((32, 32), (64, 128), (96, 96)):
        out = encoder(torch.randn(1, 3, h, w), torch.randn(1, 3, h, w))
        assert out.deep.values.shape[-2:] == (h // 32, w // 32)
        assert out.skip1.values.shape[-2:] == (h // 4, w // 4)
        assert out.skip2.values.shape[-2:] == (h // 8, w // 8)


def test_adapt_rescales_both_grids():
    encoder, cfg, corr1, corr2 = toy_encoder()
    intr = CameraIntrinsics(focal_x=240.0, baseline=0.05)
    z_min = 240.0 * 0.05 / (corr1.max_displacement * corr1.output_stride)
    encoder.adapt(CameraIntrinsics(240.0, 0.10), z_min)
    assert encoder.corr1.config.max_displacement == pytest.approx(2 * corr1.max_displacement)
    assert encoder.corr1.config.channels == corr1.channels
    assert encoder.corr2.config.max_displacement == pytest.approx(2 * corr2.max_displacement)
    assert encoder.corr2.config.channels == corr2.channels
    del intr
