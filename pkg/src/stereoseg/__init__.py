"""Stereo instance segmentation with a correlation-fused set-predicting transformer."""

from .config import PROFILES, TrainConfig, paper_profile, tiny_profile
from .correlation import (
    CameraIntrinsics,
    CorrelationConfig,
    CorrelationLayer,
    FeatureMap,
    adapt_config,
    compute_max_displacement,
    local_horizontal_correlation,
    subpixel_horizontal_sample,
)
from .decoders import DisparityDecoder, MaskDecoder
from .encoder import EncoderConfig, EncoderOutput, StereoEncoder
from .evaluation import (
    EvalConfig,
    ImageScore,
    binarize_predictions,
    eval_depth_on_objects,
    match_and_score,
)
from .losses import (
    LossWeights,
    MatchResult,
    dice_loss,
    exp_log_zero_mask_loss,
    hungarian_match,
    huber_loss,
    segmentation_set_loss,
    total_loss,
)
from .network import ModelOutput, StereoInstanceNet
from .synthetic import SceneConfig, StereoSample, generate_dataset, generate_scene, read_dataset, write_dataset
from .transformer import (
    AttentionConfig,
    QueryProcessing,
    TransformerDecoder,
    TransformerEncoder,
    attention,
    cross_attention_expanded,
    positional_encoding,
)

__version__ = "0.1.0"
