"""Upsampling decoders from the stride-32 stream back to input resolution.

The mask decoder turns each per-query map into a full-resolution logit map;
all queries are decoded by the same weights (batched over the query axis).
The disparity decoder mirrors the same stage structure with independent
weights and a softplus output. Both consume the correlation-bearing skip
connections at strides 8 and 4.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .correlation import FeatureMap

__all__ = ["DisparityDecoder", "MaskDecoder"]

DEFAULT_DECODER_WIDTHS = (64, 48, 32, 24, 16)


class _UpStage(nn.Module):
    """x2 bilinear upsampling followed by convolutional refinement.

    Pure conv/upsample (no normalization), keeping the decoder translation
    covariant up to border effects.
    """

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: Tensor, skip: Tensor | None = None) -> Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class _UpsamplingDecoder(nn.Module):
    """Five x2 stages from stride 32 to 1, skips joined at strides 8 and 4."""

    def __init__(
        self,
        in_channels: int,
        skip1_channels: int,
        skip2_channels: int,
        widths: tuple[int, ...] = DEFAULT_DECODER_WIDTHS,
        out_channels: int = 1,
    ):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("expected five decoder stage widths (stride 32 -> 1)")
        w = widths
        self.up16 = _UpStage(in_channels, 0, w[0])
        self.up8 = _UpStage(w[0], skip2_channels, w[1])
        self.up4 = _UpStage(w[1], skip1_channels, w[2])
        self.up2 = _UpStage(w[2], 0, w[3])
        self.up1 = _UpStage(w[3], 0, w[4])
        self.head = nn.Conv2d(w[4], out_channels, 3, padding=1)

    def forward(self, x: Tensor, skip1: Tensor, skip2: Tensor) -> Tensor:
        x = self.up16(x)
        x = self.up8(x, skip2)
        x = self.up4(x, skip1)
        x = self.up2(x)
        x = self.up1(x)
        return self.head(x)


def _check_skips(x: Tensor, stride: int, skip1: FeatureMap, skip2: FeatureMap) -> None:
    if skip1.stride * 2 != skip2.stride or skip2.stride * 4 != stride:
        raise ValueError(
            f"skip strides ({skip1.stride}, {skip2.stride}) are incompatible with "
            f"decoder input stride {stride}"
        )
    h, w = x.shape[-2:]
    if skip2.spatial != (h * 4, w * 4) or skip1.spatial != (h * 8, w * 8):
        raise ValueError(
            "skip spatial sizes do not match the decoder input: "
            f"input {h}x{w}, skip2 {skip2.spatial}, skip1 {skip1.spatial}"
        )


class MaskDecoder(nn.Module):
    """Shared-weight decoder from per-query maps to per-query logit maps."""

    def __init__(
        self,
        in_channels: int,
        skip1_channels: int,
        skip2_channels: int,
        widths: tuple[int, ...] = DEFAULT_DECODER_WIDTHS,
    ):
        super().__init__()
        self.decoder = _UpsamplingDecoder(in_channels, skip1_channels, skip2_channels, widths)
        # start from a low foreground prior: most query pixels are background,
        # and a near-neutral start lets the zero-mask penalty collapse every
        # query before they specialize
        nn.init.constant_(self.decoder.head.bias, -2.0)

    def forward(self, query_maps: FeatureMap, skip1: FeatureMap, skip2: FeatureMap) -> Tensor:
        """Decode (b, n_q, c, h, w) query maps into (b, n_q, H, W) logits.

        The skips are shared by all queries of a sample, so they are expanded
        over the query axis and every query runs through the same weights.
        Each query map is RMS-normalized first: queries must be told apart by
        where they attend, not by raw magnitude, which otherwise lets a few
        queries crowd out the rest beyond recovery.
        """
        x = query_maps.values
        if x.ndim != 5:
            raise ValueError(f"expected (b, n_q, c, h, w) query maps, got {tuple(x.shape)}")
        rms = x.pow(2).mean(dim=(2, 3, 4), keepdim=True).sqrt()
        x = x / (rms + 1e-6)
        _check_skips(x[:, 0], query_maps.stride, skip1, skip2)
        b, n_q = x.shape[:2]
        flat = x.reshape(b * n_q, *x.shape[2:])
        s1 = skip1.values.unsqueeze(1).expand(b, n_q, *skip1.values.shape[1:])
        s2 = skip2.values.unsqueeze(1).expand(b, n_q, *skip2.values.shape[1:])
        s1 = s1.reshape(b * n_q, *skip1.values.shape[1:])
        s2 = s2.reshape(b * n_q, *skip2.values.shape[1:])
        logits = self.decoder(flat, s1, s2)
        return logits.reshape(b, n_q, *logits.shape[-2:])


class DisparityDecoder(nn.Module):
    """Single-channel decoder with a softplus output (disparity >= 0)."""

    def __init__(
        self,
        in_channels: int,
        skip1_channels: int,
        skip2_channels: int,
        widths: tuple[int, ...] = DEFAULT_DECODER_WIDTHS,
    ):
        super().__init__()
        self.decoder = _UpsamplingDecoder(in_channels, skip1_channels, skip2_channels, widths)

    def forward(self, memory_map: FeatureMap, skip1: FeatureMap, skip2: FeatureMap) -> Tensor:
        x = memory_map.values
        if x.ndim != 4:
            raise ValueError(f"expected (b, c, h, w) features, got {tuple(x.shape)}")
        _check_skips(x, memory_map.stride, skip1, skip2)
        out = self.decoder(x, skip1.values, skip2.values)
        return F.softplus(out.squeeze(1))
