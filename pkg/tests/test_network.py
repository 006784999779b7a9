"""End-to-end forward tests for the assembled model."""

import pytest
import torch

from stereoseg.config import (
    attention_config,
    build_correlation_configs,
    encoder_config,
    tiny_profile,
)
from stereoseg.correlation import CameraIntrinsics
from stereoseg.network import StereoInstanceNet
from stereoseg.train import build_model


def tiny_model(**overrides) -> StereoInstanceNet:
    cfg = tiny_profile()
    if overrides:
        import dataclasses

        cfg = dataclasses.replace(cfg, **overrides)
    return build_model(cfg)


class TestForward:
    def test_output_shapes(self):
        model = tiny_model().eval()
        left = torch.rand(2, 3, 96, 128)
        right = torch.rand(2, 3, 96, 128)
        with torch.no_grad():
            out = model(left, right)
        assert len(out.mask_logits) == 2  # one per decoder layer
        for logits in out.mask_logits:
            assert logits.shape == (2, 6, 96, 128)
        assert out.disparity.shape == (2, 96, 128)
        assert torch.all(out.disparity >= 0)

    def test_final_only_mode(self):
        model = tiny_model().eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 96, 128), torch.rand(1, 3, 96, 128),
                        decode_aux_masks=False)
        assert len(out.mask_logits) == 1

    def test_arbitrary_sizes_divisible_by_32(self):
        model = tiny_model().eval()
        for h, w in ((64, 64), (96, 160), (128, 96)):
            with torch.no_grad():
                out = model(torch.rand(1, 3, h, w), torch.rand(1, 3, h, w))
            assert out.mask_logits[-1].shape[-2:] == (h, w)

    @pytest.mark.parametrize(
        "variant", ["c-att-exp", "c-att", "c-att-cat-bb", "c-att-cat-tfenc"]
    )
    def test_all_query_processing_variants_forward(self, variant):
        model = tiny_model(query_processing=variant).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 96, 128), torch.rand(1, 3, 96, 128))
        assert out.mask_logits[-1].shape == (1, 6, 96, 128)
        assert torch.isfinite(out.mask_logits[-1]).all()

    def test_gradients_flow_to_all_components(self):
        model = tiny_model()
        out = model(torch.rand(1, 3, 96, 128), torch.rand(1, 3, 96, 128))
        loss = out.mask_logits[-1].square().mean() + out.disparity.square().mean()
        loss.backward()
        for name in ("encoder.stage1.0.0.weight", "tf_decoder.query_embed.weight",
                     "mask_decoder.decoder.head.weight",
                     "disparity_decoder.decoder.head.weight"):
            param = dict(model.named_parameters())[name]
            assert param.grad is not None and param.grad.abs().sum() > 0, name


class TestAdaptation:
    def test_identity_adaptation_is_bit_stable(self):
        cfg = tiny_profile()
        model = build_model(cfg).eval()
        left = torch.rand(1, 3, 96, 128)
        right = torch.rand(1, 3, 96, 128)
        with torch.no_grad():
            base = model(left, right)
        model.adapt_intrinsics(cfg.intrinsics(), cfg.z_min)
        with torch.no_grad():
            adapted = model(left, right)
        assert torch.equal(base.mask_logits[-1], adapted.mask_logits[-1])
        assert torch.equal(base.disparity, adapted.disparity)

    def test_doubled_baseline_keeps_channels(self):
        cfg = tiny_profile()
        model = build_model(cfg)
        before = model.correlation_configs
        model.adapt_intrinsics(CameraIntrinsics(cfg.focal_x, cfg.baseline * 2), cfg.z_min)
        after = model.correlation_configs
        for b, a in zip(before, after):
            assert a.channels == b.channels
            assert a.max_displacement == pytest.approx(2 * b.max_displacement)
            assert a.step_size == pytest.approx(2 * b.step_size)

    def test_channel_count_is_locked(self):
        cfg = tiny_profile()
        model = build_model(cfg)
        corr1, corr2 = build_correlation_configs(cfg)
        import dataclasses

        wrong = dataclasses.replace(
            corr1, channels=corr1.channels + 1,
            max_displacement=(corr1.channels + 1) * corr1.step_size,
        )
        with pytest.raises(ValueError, match="fixed"):
            model.set_correlation_configs(wrong, corr2)


def test_config_agreement_is_enforced():
    cfg = tiny_profile()
    enc = encoder_config(cfg)
    import dataclasses

    att = dataclasses.replace(attention_config(cfg), d_model=128)
    corr1, corr2 = build_correlation_configs(cfg)
    with pytest.raises(ValueError, match="d_model"):
        StereoInstanceNet(enc, att, corr1, corr2)
