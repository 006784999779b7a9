"""Full model: stereo encoder, transformer, mask and disparity decoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .correlation import CameraIntrinsics, CorrelationConfig, FeatureMap
from .decoders import DEFAULT_DECODER_WIDTHS, DisparityDecoder, MaskDecoder
from .encoder import EncoderConfig, EncoderOutput, StereoEncoder
from .transformer import (
    AttentionConfig,
    DecoderOutput,
    QueryProcessing,
    TransformerDecoder,
    TransformerEncoder,
)

__all__ = ["ModelOutput", "StereoInstanceNet"]


@dataclass
class ModelOutput:
    """Per-layer mask logits, disparity, and intermediate results.

    ``mask_logits`` holds one (b, n_q, H, W) tensor per decoded transformer
    layer (only the final layer unless auxiliary decoding is requested); the
    last entry is the model's prediction.
    """

    mask_logits: list[Tensor]
    disparity: Tensor
    encoder: EncoderOutput
    decoder: DecoderOutput


class StereoInstanceNet(nn.Module):
    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        attention_cfg: AttentionConfig,
        corr1: CorrelationConfig,
        corr2: CorrelationConfig,
        decoder_widths: tuple[int, ...] = DEFAULT_DECODER_WIDTHS,
    ):
        super().__init__()
        if encoder_cfg.d_model != attention_cfg.d_model:
            raise ValueError("encoder and transformer must agree on d_model")
        self.encoder = StereoEncoder(encoder_cfg, corr1, corr2)
        self.tf_encoder = TransformerEncoder(attention_cfg)
        self.tf_decoder = TransformerDecoder(attention_cfg)
        self.attention_cfg = attention_cfg
        map_channels = attention_cfg.query_map_channels(attention_cfg.d_model)
        self.mask_decoder = MaskDecoder(
            map_channels,
            self.encoder.skip1_channels,
            self.encoder.skip2_channels,
            decoder_widths,
        )
        self.disparity_decoder = DisparityDecoder(
            attention_cfg.d_model,
            self.encoder.skip1_channels,
            self.encoder.skip2_channels,
            decoder_widths,
        )

    @property
    def correlation_configs(self) -> tuple[CorrelationConfig, CorrelationConfig]:
        return self.encoder.corr1.config, self.encoder.corr2.config

    def set_correlation_configs(self, corr1: CorrelationConfig, corr2: CorrelationConfig) -> None:
        if (corr1.channels, corr2.channels) != (
            self.encoder.corr1.config.channels,
            self.encoder.corr2.config.channels,
        ):
            raise ValueError("correlation channel counts are fixed after construction")
        self.encoder.corr1.config = corr1
        self.encoder.corr2.config = corr2

    def adapt_intrinsics(self, intrinsics: CameraIntrinsics, z_min: float) -> None:
        """Re-target both correlation grids to new camera parameters."""
        self.encoder.adapt(intrinsics, z_min)

    def forward(self, left: Tensor, right: Tensor, decode_aux_masks: bool = True) -> ModelOutput:
        enc = self.encoder(left, right)
        deep = enc.deep.values
        h, w = deep.shape[-2:]
        memory = self.tf_encoder(deep)

        mode = self.attention_cfg.query_processing
        if mode is QueryProcessing.CAT_BACKBONE:
            extra = deep
        elif mode is QueryProcessing.CAT_ENCODER:
            extra = memory.transpose(1, 2).reshape_as(deep)
        else:
            extra = None
        dec = self.tf_decoder(memory, h, w, extra)

        layer_maps = dec.query_maps if decode_aux_masks else dec.query_maps[-1:]
        stride = enc.deep.stride
        mask_logits = [
            self.mask_decoder(FeatureMap(maps, stride), enc.skip1, enc.skip2)
            for maps in layer_maps
        ]
        memory_map = memory.transpose(1, 2).reshape_as(deep)
        disparity = self.disparity_decoder(FeatureMap(memory_map, stride), enc.skip1, enc.skip2)
        return ModelOutput(mask_logits=mask_logits, disparity=disparity, encoder=enc, decoder=dec)
