"""Training configuration, named profiles and the flat config-file format.

Config files are plain ``key = value`` lines (``#`` comments allowed); every
key must be a ``TrainConfig`` field, unknown keys are rejected. Values are
coerced by the field type; tuples are comma-separated. Precedence is
command-line flag > config file > profile default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .correlation import CameraIntrinsics, CorrelationConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .synthetic import SceneConfig
from .transformer import AttentionConfig

__all__ = [
    "PROFILES",
    "TrainConfig",
    "apply_settings",
    "attention_config",
    "build_correlation_configs",
    "encoder_config",
    "load_config_file",
    "paper_profile",
    "scene_config",
    "tiny_profile",
]


@dataclass(frozen=True)
class TrainConfig:
    # input geometry
    image_height: int = 480
    image_width: int = 640
    focal_x: float = 640.0
    baseline: float = 0.048
    z_min: float = 0.12              # nearest depth the correlation must cover

    # backbone
    stage_widths: tuple[int, ...] = (256, 512, 1024, 2048)
    reduction_ratio: int = 8
    use_axial_attention: bool = False
    axial_heads: int = 4
    corr1_step: float = 1.0
    corr2_step: float = 1.0

    # transformer
    d_model: int = 256
    num_heads: int = 8
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    num_queries: int = 15
    query_processing: str = "c-att-exp"
    dropout: float = 0.1

    # decoders
    decoder_widths: tuple[int, ...] = (64, 48, 32, 24, 16)

    # loss
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.2
    huber_delta: float = 1.0

    # optimization
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 2
    epochs: int = 40
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1        # epochs; 0 keeps only the final checkpoint
    val_every: int = 0               # epochs between validations; 0 = final only
    single_rgb: bool = False         # feed the left image on both branches

    # synthetic data generation
    min_objects: int = 5
    max_objects: int = 12
    z_near: float = 0.3
    z_far: float = 1.5
    min_object_frac: float = 0.16
    max_object_frac: float = 0.42
    low_contrast_fraction: float = 0.5

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal_x, self.baseline)


def paper_profile() -> TrainConfig:
    """Full-scale settings; shipped as a named config, not used by the tests."""
    return TrainConfig()


def tiny_profile() -> TrainConfig:
    """Desk-scale profile sized so training completes on a CPU in minutes."""
    return TrainConfig(
        image_height=96,
        image_width=128,
        focal_x=240.0,
        baseline=0.05,
        z_min=0.8,
        stage_widths=(16, 24, 48, 64),
        reduction_ratio=2,
        corr1_step=0.5,
        corr2_step=0.5,
        d_model=64,
        num_heads=4,
        num_encoder_layers=2,
        num_decoder_layers=2,
        num_queries=6,
        dropout=0.0,
        decoder_widths=(32, 24, 16, 12, 8),
        lr=4e-4,
        batch_size=4,
        epochs=16,
        min_objects=2,
        max_objects=4,
        z_near=1.0,
        z_far=4.0,
        min_object_frac=0.22,
        max_object_frac=0.5,
    )


PROFILES = {"paper": paper_profile, "tiny": tiny_profile}


def encoder_config(cfg: TrainConfig) -> EncoderConfig:
    return EncoderConfig(
        stage_widths=tuple(cfg.stage_widths),
        reduction_ratio=cfg.reduction_ratio,
        d_model=cfg.d_model,
        use_axial_attention=cfg.use_axial_attention,
        axial_heads=cfg.axial_heads,
    )


def attention_config(cfg: TrainConfig) -> AttentionConfig:
    return AttentionConfig(
        d_model=cfg.d_model,
        num_heads=cfg.num_heads,
        num_encoder_layers=cfg.num_encoder_layers,
        num_decoder_layers=cfg.num_decoder_layers,
        num_queries=cfg.num_queries,
        query_processing=cfg.query_processing,
        dropout=cfg.dropout,
    )


def build_correlation_configs(cfg: TrainConfig) -> tuple[CorrelationConfig, CorrelationConfig]:
    enc = encoder_config(cfg)
    intr = cfg.intrinsics()
    corr1 = CorrelationConfig.from_geometry(intr, cfg.z_min, enc.corr1_stride, cfg.corr1_step)
    corr2 = CorrelationConfig.from_geometry(intr, cfg.z_min, enc.corr2_stride, cfg.corr2_step)
    return corr1, corr2


def scene_config(cfg: TrainConfig, seed: int | None = None) -> SceneConfig:
    return SceneConfig(
        height=cfg.image_height,
        width=cfg.image_width,
        min_objects=cfg.min_objects,
        max_objects=cfg.max_objects,
        z_near=cfg.z_near,
        z_far=cfg.z_far,
        intrinsics=cfg.intrinsics(),
        seed=cfg.seed if seed is None else seed,
        min_object_frac=cfg.min_object_frac,
        max_object_frac=cfg.max_object_frac,
        low_contrast_fraction=cfg.low_contrast_fraction,
    )


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str) -> Any:
    field = _FIELDS[name]
    annotation = str(field.type)
    raw = raw.strip()
    if annotation == "bool":
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean value {raw!r} for key {name!r}")
    if annotation == "int":
        return int(raw)
    if annotation == "float":
        return float(raw)
    if annotation.startswith("tuple"):
        return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    return raw


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; returns raw string settings."""
    settings: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        settings[key.strip()] = value.strip()
    return settings


def apply_settings(cfg: TrainConfig, settings: Mapping[str, Any]) -> TrainConfig:
    """Override config fields; unknown keys are rejected."""
    unknown = [k for k in settings if k not in _FIELDS]
    if unknown:
        raise ValueError(
            f"unknown config key(s): {', '.join(sorted(unknown))}; "
            f"valid keys: {', '.join(sorted(_FIELDS))}"
        )
    coerced = {
        key: _coerce(key, value) if isinstance(value, str) else value
        for key, value in settings.items()
    }
    return dataclasses.replace(cfg, **coerced)


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    out["stage_widths"] = list(cfg.stage_widths)
    out["decoder_widths"] = list(cfg.decoder_widths)
    return out


def config_from_dict(data: Mapping[str, Any]) -> TrainConfig:
    unknown = [k for k in data if k not in _FIELDS]
    if unknown:
        raise ValueError(f"unknown config key(s) in snapshot: {', '.join(sorted(unknown))}")
    values = dict(data)
    for key in ("stage_widths", "decoder_widths"):
        if key in values:
            values[key] = tuple(values[key])
    return TrainConfig(**values)
