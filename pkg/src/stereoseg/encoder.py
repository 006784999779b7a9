"""Shared-weight two-branch feature extractor over a stereo pair.

Both images run through the same convolutional stages. After each of the
first two stages the features are channel-reduced and correlated along the
horizontal axis; each correlation result is concatenated onto the reduced
left features as a skip connection, and the second one is additionally fused
into the left trunk so the transformer sees correlation information. Stages
three and four (optionally axial-attention blocks) then process the fused
left stream down to the deep map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .correlation import CorrelationConfig, CorrelationLayer, FeatureMap
from .transformer import MultiheadAttention

__all__ = ["EncoderConfig", "EncoderOutput", "StereoEncoder"]


@dataclass(frozen=True)
class EncoderConfig:
    stage_widths: tuple[int, int, int, int] = (256, 512, 1024, 2048)
    stage_strides: tuple[int, int, int, int] = (4, 2, 2, 2)
    reduction_ratio: int = 8
    d_model: int = 256
    use_axial_attention: bool = False
    axial_heads: int = 4
    axial_max_len: int = 64

    def __post_init__(self) -> None:
        if len(self.stage_widths) != 4 or len(self.stage_strides) != 4:
            raise ValueError("expected exactly four stages")
        if any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths must be >= 1")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")
        for w in self.stage_widths[:2]:
            if w % self.reduction_ratio != 0:
                raise ValueError(
                    "the first two stage widths must be divisible by reduction_ratio"
                )
        if self.use_axial_attention:
            for w in self.stage_widths[2:]:
                if w % self.axial_heads != 0:
                    raise ValueError("axial stage widths must be divisible by axial_heads")

    @property
    def total_stride(self) -> int:
        return math.prod(self.stage_strides)

    @property
    def corr1_stride(self) -> int:
        return self.stage_strides[0]

    @property
    def corr2_stride(self) -> int:
        return self.stage_strides[0] * self.stage_strides[1]


@dataclass
class EncoderOutput:
    """Skip connections (reduced left features + correlation) and deep map."""

    skip1: FeatureMap
    skip2: FeatureMap
    deep: FeatureMap


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


def _conv_block(in_ch: int, out_ch: int, kernel: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False),
        _group_norm(out_ch),
        nn.ReLU(inplace=True),
    )


def _conv_stage(in_ch: int, out_ch: int, stride: int, first: bool = False) -> nn.Sequential:
    if first and stride == 4:
        # stem-style stage: two stride-2 convolutions
        return nn.Sequential(
            _conv_block(in_ch, out_ch, 7, 2),
            _conv_block(out_ch, out_ch, 3, 2),
        )
    return nn.Sequential(
        _conv_block(in_ch, out_ch, 3, stride),
        _conv_block(out_ch, out_ch, 3, 1),
    )


class _AxialBlock(nn.Module):
    """Factorized self-attention: one pass along height, one along width.

    Each pass adds a learned positional term to its axis before attending;
    a small feed-forward follows, all with residual connections.
    """

    def __init__(self, channels: int, heads: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.row_pos = nn.Parameter(torch.randn(max_len, channels) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(max_len, channels) * 0.02)
        self.row_attn = MultiheadAttention(channels, heads)
        self.col_attn = MultiheadAttention(channels, heads)
        self.norm1 = nn.LayerNorm(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.norm3 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 2 * channels), nn.ReLU(inplace=True),
            nn.Linear(2 * channels, channels),
        )

    def _axis_attention(self, x, attn, pos, norm, along_width: bool):
        b, c, h, w = x.shape
        if along_width:
            tokens = x.permute(0, 2, 3, 1).reshape(b * h, w, c)
            p = pos[:w]
        else:
            tokens = x.permute(0, 3, 2, 1).reshape(b * w, h, c)
            p = pos[:h]
        t = norm(tokens)
        qk = t + p
        out, _, _, _ = attn(qk, qk, t)
        tokens = tokens + out
        if along_width:
            return tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)
        return tokens.reshape(b, w, h, c).permute(0, 3, 2, 1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h > self.max_len or w > self.max_len:
            raise ValueError(
                f"axial block supports spatial sizes up to {self.max_len}, got {h}x{w}"
            )
        x = self._axis_attention(x, self.row_attn, self.row_pos, self.norm1, along_width=False)
        x = self._axis_attention(x, self.col_attn, self.col_pos, self.norm2, along_width=True)
        b, c, hh, ww = x.shape
        tokens = x.permute(0, 2, 3, 1).reshape(b, hh * ww, c)
        tokens = tokens + self.mlp(self.norm3(tokens))
        return tokens.reshape(b, hh, ww, c).permute(0, 3, 1, 2)


def _axial_stage(in_ch: int, out_ch: int, stride: int, heads: int, max_len: int) -> nn.Sequential:
    return nn.Sequential(
        _conv_block(in_ch, out_ch, 3, stride),
        _AxialBlock(out_ch, heads, max_len),
    )


class StereoEncoder(nn.Module):
    """Four-stage encoder with two correlation insertion points."""

    def __init__(self, cfg: EncoderConfig, corr1: CorrelationConfig, corr2: CorrelationConfig):
        super().__init__()
        if corr1.output_stride != cfg.corr1_stride:
            raise ValueError(
                f"corr1 output_stride {corr1.output_stride} does not match the "
                f"stride after stage 1 ({cfg.corr1_stride})"
            )
        if corr2.output_stride != cfg.corr2_stride:
            raise ValueError(
                f"corr2 output_stride {corr2.output_stride} does not match the "
                f"stride after stage 2 ({cfg.corr2_stride})"
            )
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.stage_widths
        s1, s2, s3, s4 = cfg.stage_strides
        r = cfg.reduction_ratio

        self.stage1 = _conv_stage(3, w1, s1, first=True)
        self.stage2 = _conv_stage(w1, w2, s2)
        if cfg.use_axial_attention:
            self.stage3 = _axial_stage(w2, w3, s3, cfg.axial_heads, cfg.axial_max_len)
            self.stage4 = _axial_stage(w3, w4, s4, cfg.axial_heads, cfg.axial_max_len)
        else:
            self.stage3 = _conv_stage(w2, w3, s3)
            self.stage4 = _conv_stage(w3, w4, s4)

        self.reduce1 = nn.Conv2d(w1, w1 // r, 1)
        self.reduce2 = nn.Conv2d(w2, w2 // r, 1)
        self.corr1 = CorrelationLayer(corr1)
        self.corr2 = CorrelationLayer(corr2)
        # fits the fused (reduced features + correlation) map to stage 3
        self.fuse2 = nn.Conv2d(w2 // r + corr2.channels, w2, 1)
        self.reduce_deep = nn.Conv2d(w4, cfg.d_model, 1)

    @property
    def skip1_channels(self) -> int:
        return self.cfg.stage_widths[0] // self.cfg.reduction_ratio + self.corr1.config.channels

    @property
    def skip2_channels(self) -> int:
        return self.cfg.stage_widths[1] // self.cfg.reduction_ratio + self.corr2.config.channels

    def adapt(self, intrinsics, z_min: float) -> None:
        """Re-target both correlation grids; no parameters change."""
        self.corr1.adapt(intrinsics, z_min)
        self.corr2.adapt(intrinsics, z_min)

    def forward(self, left: Tensor, right: Tensor) -> EncoderOutput:
        if left.shape != right.shape:
            raise ValueError(
                f"left and right must have the same shape, got "
                f"{tuple(left.shape)} vs {tuple(right.shape)}"
            )
        h, w = left.shape[-2:]
        stride = self.cfg.total_stride
        if h % stride or w % stride:
            raise ValueError(f"input size {h}x{w} must be divisible by {stride}")

        l1 = self.stage1(left)
        r1 = self.stage1(right)
        l1r = self.reduce1(l1)
        r1r = self.reduce1(r1)
        skip1 = torch.cat([l1r, self.corr1(l1r, r1r)], dim=1)

        l2 = self.stage2(l1)
        r2 = self.stage2(r1)
        l2r = self.reduce2(l2)
        r2r = self.reduce2(r2)
        skip2 = torch.cat([l2r, self.corr2(l2r, r2r)], dim=1)

        trunk = self.fuse2(skip2)
        trunk = self.stage3(trunk)
        trunk = self.stage4(trunk)
        deep = self.reduce_deep(trunk)

        return EncoderOutput(
            skip1=FeatureMap(skip1, self.cfg.corr1_stride),
            skip2=FeatureMap(skip2, self.cfg.corr2_stride),
            deep=FeatureMap(deep, stride),
        )
