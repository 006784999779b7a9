"""Tests for the horizontal correlation layer and intrinsics adaptation."""

import math

import numpy as np
import pytest
import torch

from stereoseg.correlation import (
    CameraIntrinsics,
    CorrelationConfig,
    CorrelationLayer,
    FeatureMap,
    adapt_config,
    compute_max_displacement,
    local_horizontal_correlation,
    subpixel_horizontal_sample,
)


def reference_correlation(f_a: np.ndarray, f_b: np.ndarray, channels: int,
                          step: float) -> np.ndarray:
    """Nested-loop oracle: channel i at x is <f_a(x), f_b(x - i*step)>.

    Fractional sample positions interpolate linearly between columns;
    positions outside the map contribute zero.
    """
    c, h, w = f_a.shape
    out = np.zeros((channels, h, w))
    for i in range(channels):
        for y in range(h):
            for x in range(w):
                pos = x - i * step
                lo = math.floor(pos)
                frac = pos - lo
                acc = 0.0
                for ch in range(c):
                    val = 0.0
                    if 0 <= lo < w:
                        val += (1.0 - frac) * f_b[ch, y, lo]
                    if 0 <= lo + 1 < w:
                        val += frac * f_b[ch, y, lo + 1]
                    acc += f_a[ch, y, x] * val
                out[i, y, x] = acc
    return out


def integer_shift_correlation(f_a: torch.Tensor, f_b: torch.Tensor,
                              channels: int, step: int) -> torch.Tensor:
    """Reference using pure integer column shifts (no interpolation)."""
    c, h, w = f_a.shape
    out = torch.zeros(channels, h, w, dtype=f_a.dtype)
    for i in range(channels):
        shift = i * step
        shifted = torch.zeros_like(f_b)
        if shift < w:
            shifted[..., shift:] = f_b[..., : w - shift]
        out[i] = (f_a * shifted).sum(dim=0)
    return out


def make_config(channels: int, step: float, stride: int = 4) -> CorrelationConfig:
    return CorrelationConfig(channels * step, step, channels, stride)


class TestLocalHorizontalCorrelation:
    def test_constant_maps(self):
        ones = torch.ones(4, 5, 7)
        out = local_horizontal_correlation(ones, ones, make_config(3, 1.0))
        assert out.shape == (3, 5, 7)
        # interior columns see the full inner product of the 4 channels
        assert torch.all(out[:, :, 2:] == 4.0)
        # leftmost column: shifted samples fall off the map for i >= 1
        assert torch.all(out[1:, :, 0] == 0.0)
        assert torch.all(out[0, :, 0] == 4.0)

    def test_translated_features_peak_channel(self):
        rng = np.random.default_rng(0)
        c, h, w, d = 8, 6, 32, 3
        base = rng.normal(size=(c, h, w))
        base /= np.linalg.norm(base, axis=0, keepdims=True)
        f_a = base.copy()
        f_b = np.zeros_like(base)
        f_b[:, :, : w - d] = base[:, :, d:]  # right view: content shifted left by d

        out = local_horizontal_correlation(
            torch.from_numpy(f_a), torch.from_numpy(f_b), make_config(8, 1.0)
        )
        oracle = reference_correlation(f_a, f_b, 8, 1.0)
        np.testing.assert_allclose(out.numpy(), oracle, rtol=1e-6, atol=1e-9)

        interior = out[:, :, 8 : w - d]
        assert torch.all(interior.argmax(dim=0) == d)

    def test_paper_scale_output_shape(self):
        cfg = CorrelationConfig.from_step_size(64.0, 1.0, 4)
        assert cfg.channels == 64 and cfg.step_size == 1.0
        f = torch.randn(2, 120, 160)
        out = local_horizontal_correlation(f, f, cfg)
        assert out.shape == (64, 120, 160)

    def test_fractional_step_output_shape(self):
        f = torch.randn(3, 6, 9)
        out = local_horizontal_correlation(f, f, make_config(5, 0.75))
        assert out.shape == (5, 6, 9)

    def test_matches_oracle_fractional_step(self):
        rng = np.random.default_rng(7)
        f_a = rng.normal(size=(4, 5, 10))
        f_b = rng.normal(size=(4, 5, 10))
        cfg = make_config(6, 0.5)
        out = local_horizontal_correlation(torch.from_numpy(f_a), torch.from_numpy(f_b), cfg)
        oracle = reference_correlation(f_a, f_b, 6, 0.5)
        np.testing.assert_allclose(out.numpy(), oracle, rtol=1e-6, atol=1e-12)

    def test_integer_step_equals_integer_shift_reference(self):
        torch.manual_seed(3)
        f_a = torch.randn(5, 4, 12, dtype=torch.float64)
        f_b = torch.randn(5, 4, 12, dtype=torch.float64)
        out = local_horizontal_correlation(f_a, f_b, make_config(6, 1.0))
        ref = integer_shift_correlation(f_a, f_b, 6, 1)
        assert torch.allclose(out, ref, rtol=1e-6, atol=0)

    def test_bilinearity(self):
        torch.manual_seed(5)
        f_a = torch.randn(3, 4, 8, dtype=torch.float64)
        f_b = torch.randn(3, 4, 8, dtype=torch.float64)
        cfg = make_config(4, 0.5)
        base = local_horizontal_correlation(f_a, f_b, cfg)
        # scaling by a power of two is exact in floating point
        assert torch.equal(local_horizontal_correlation(2.0 * f_a, f_b, cfg), 2.0 * base)
        scaled = local_horizontal_correlation(0.7 * f_a, 1.3 * f_b, cfg)
        assert torch.allclose(scaled, 0.7 * 1.3 * base, rtol=1e-12)
        # additivity in the second argument
        f_c = torch.randn_like(f_b)
        both = local_horizontal_correlation(f_a, f_b + f_c, cfg)
        assert torch.allclose(
            both, base + local_horizontal_correlation(f_a, f_c, cfg), rtol=1e-10
        )

    def test_batched_matches_unbatched(self):
        torch.manual_seed(11)
        f_a = torch.randn(2, 3, 4, 8)
        f_b = torch.randn(2, 3, 4, 8)
        cfg = make_config(4, 1.0)
        out = local_horizontal_correlation(f_a, f_b, cfg)
        assert out.shape == (2, 4, 4, 8)
        for b in range(2):
            single = local_horizontal_correlation(f_a[b], f_b[b], cfg)
            assert torch.equal(out[b], single)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes must match"):
            local_horizontal_correlation(
                torch.ones(3, 4, 5), torch.ones(3, 4, 6), make_config(2, 1.0)
            )

    def test_rejects_non_finite(self):
        bad = torch.ones(2, 3, 4)
        bad[0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="finite"):
            local_horizontal_correlation(bad, torch.ones(2, 3, 4), make_config(2, 1.0))

    def test_gradients_match_finite_differences(self):
        """Analytic gradients against central differences at 64-bit."""
        torch.manual_seed(2)
        for step in (1.0, 0.5):
            cfg = make_config(5, step)
            f_a = torch.randn(4, 6, 8, dtype=torch.float64, requires_grad=True)
            f_b = torch.randn(4, 6, 8, dtype=torch.float64, requires_grad=True)
            projection = torch.randn(5, 6, 8, dtype=torch.float64)

            loss = (local_horizontal_correlation(f_a, f_b, cfg) * projection).sum()
            loss.backward()

            eps = 1e-6
            for tensor, grad in ((f_a, f_a.grad), (f_b, f_b.grad)):
                numeric = torch.zeros_like(tensor)
                flat = tensor.detach().reshape(-1)
                numeric_flat = numeric.reshape(-1)
                for i in range(flat.numel()):
                    original = flat[i].item()
                    flat[i] = original + eps
                    up = (local_horizontal_correlation(
                        f_a.detach(), f_b.detach(), cfg) * projection).sum()
                    flat[i] = original - eps
                    down = (local_horizontal_correlation(
                        f_a.detach(), f_b.detach(), cfg) * projection).sum()
                    flat[i] = original
                    numeric_flat[i] = (up - down) / (2 * eps)
                denom = torch.maximum(
                    torch.maximum(grad.abs(), numeric.abs()), torch.ones_like(numeric)
                )
                max_rel = ((grad - numeric).abs() / denom).max().item()
                assert max_rel <= 1e-5, f"step={step}: max relative error {max_rel}"


class TestPeakChannelPreservation:
    def _argmax_channel(self, cfg: CorrelationConfig, displacement: float) -> torch.Tensor:
        rng = np.random.default_rng(42)
        c, h, w = 8, 4, 64
        base = rng.normal(size=(c, h, w + 40))
        base /= np.linalg.norm(base, axis=0, keepdims=True)
        f_a = torch.from_numpy(base[:, :, :w].copy())
        shifted = torch.from_numpy(base.copy())
        f_b = subpixel_horizontal_sample(shifted, displacement)[:, :, :w]
        out = local_horizontal_correlation(f_a, f_b, cfg)
        margin = math.ceil(cfg.max_displacement) + 1
        return out[:, :, margin:].argmax(dim=0)

    def test_rescaled_grid_keeps_argmax_channel(self):
        d = 3.0
        base_cfg = make_config(8, 1.0)
        argmax = self._argmax_channel(base_cfg, d)
        assert (argmax == round(d / 1.0)).float().mean() > 0.99

        k = 2.0
        scaled_cfg = CorrelationConfig(
            base_cfg.max_displacement * k, base_cfg.step_size * k,
            base_cfg.channels, base_cfg.output_stride,
        )
        scaled_argmax = self._argmax_channel(scaled_cfg, d * k)
        assert (scaled_argmax == round(d / 1.0)).float().mean() > 0.99


class TestSubpixelSample:
    def test_zero_shift_is_identity(self):
        f = torch.randn(2, 3, 5)
        assert torch.equal(subpixel_horizontal_sample(f, 0.0), f)

    def test_integer_shift_translates_columns(self):
        f = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
        out = subpixel_horizontal_sample(f, 2.0)
        assert torch.equal(out, torch.tensor([[[3.0, 4.0, 0.0, 0.0]]]))

    def test_half_shift_interpolates(self):
        f = torch.tensor([[[0.0, 2.0]]])
        out = subpixel_horizontal_sample(f, 0.5)
        assert out[0, 0, 0].item() == pytest.approx(1.0)

    def test_negative_shift_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            subpixel_horizontal_sample(torch.ones(1, 2, 3), -0.5)

    def test_feature_map_wrapper_round_trip(self):
        fm = FeatureMap(torch.randn(2, 3, 4), stride=4)
        out = subpixel_horizontal_sample(fm, 1.0)
        assert isinstance(out, FeatureMap) and out.stride == 4


class TestMaxDisplacement:
    def test_direct_substitution(self):
        intr = CameraIntrinsics(focal_x=640.0, baseline=0.12)
        assert compute_max_displacement(intr, 0.3, 8) == pytest.approx(32.0)

    def test_linearity_in_focal_baseline(self):
        intr = CameraIntrinsics(500.0, 0.1)
        doubled = CameraIntrinsics(1000.0, 0.1)
        assert compute_max_displacement(doubled, 0.4, 4) == pytest.approx(
            2 * compute_max_displacement(intr, 0.4, 4)
        )

    def test_reference_scale_disparity_budget(self):
        # 64 steps at stride 4 cover roughly 256 px of image disparity; the
        # published budget of 260 differs only by the receptive-field centre
        # offset, which this implementation does not fold in.
        assert 64 * 4 == 256
        assert abs(64 * 4 - 260) <= 8

    def test_rejects_non_positive_z(self):
        with pytest.raises(ValueError, match="z_min"):
            compute_max_displacement(CameraIntrinsics(500.0, 0.1), 0.0, 4)


class TestAdaptConfig:
    def test_doubled_focal_baseline_product(self):
        trained = CorrelationConfig(64.0, 1.0, 64, 4)
        old = CameraIntrinsics(640.0, 0.1)
        new = CameraIntrinsics(1280.0, 0.1)
        z_min = 640.0 * 0.1 / (64.0 * 4)
        adapted = adapt_config(trained, new, z_min)
        assert adapted.max_displacement == pytest.approx(128.0)
        assert adapted.step_size == pytest.approx(2.0)
        assert adapted.channels == 64
        assert adapted.output_stride == 4
        del old

    def test_identity_adaptation_is_bitwise_stable(self):
        intr = CameraIntrinsics(613.7, 0.0713)
        trained = CorrelationConfig.from_geometry(intr, 0.37, 8, step_size=0.5)
        adapted = adapt_config(trained, intr, 0.37)
        assert adapted == trained

    def test_halved_minimum_depth(self):
        trained = CorrelationConfig(32.0, 1.0, 32, 4)
        intr = CameraIntrinsics(640.0, 0.1)
        z_min = 640.0 * 0.1 / (32.0 * 4)
        adapted = adapt_config(trained, intr, z_min / 2)
        assert adapted.max_displacement == pytest.approx(64.0)
        assert adapted.step_size == pytest.approx(2.0)
        assert adapted.channels == 32


class TestConfigValidation:
    def test_channels_snap_to_grid(self):
        cfg = CorrelationConfig.from_step_size(2.5, 1.0, 4)
        assert cfg.channels == 2 or cfg.channels == 3
        assert cfg.channels == round(cfg.max_displacement / cfg.step_size)

    def test_inconsistent_grid_rejected(self):
        with pytest.raises(ValueError, match="inconsistent grid"):
            CorrelationConfig(10.0, 1.0, 5, 4)

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError, match="output_stride"):
            CorrelationConfig(4.0, 1.0, 4, 3)


def test_correlation_layer_has_no_parameters():
    layer = CorrelationLayer(make_config(8, 1.0))
    assert list(layer.parameters()) == []
    out = layer(torch.ones(2, 3, 4), torch.ones(2, 3, 4))
    assert out.shape == (8, 3, 4)
