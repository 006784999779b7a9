"""Local horizontal correlation with sub-pixel sampling.

Output channel ``i`` of the correlation compares the left feature at column
``x`` with the right feature at column ``x - i*s`` (the right map is shifted
toward positive x and zero padded on the left), so positive disparities land
at positive channel indices. Fractional displacements are resolved by linear
interpolation between neighbouring columns.

The layer has no learnable parameters. This is what allows re-targeting a
trained model to a different focal length, baseline or minimum scene distance
by recomputing the displacement grid ``(max_displacement, step_size)`` while
keeping the channel count fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

__all__ = [
    "CameraIntrinsics",
    "CorrelationConfig",
    "CorrelationLayer",
    "FeatureMap",
    "adapt_config",
    "compute_max_displacement",
    "local_horizontal_correlation",
    "subpixel_horizontal_sample",
]

_ALLOWED_STRIDES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Rectified stereo camera parameters.

    Only the horizontal focal length and the baseline enter the displacement
    math; the remaining fields are carried along as dataset metadata.
    """

    focal_x: float
    baseline: float
    focal_y: float | None = None
    principal_x: float | None = None
    principal_y: float | None = None

    def __post_init__(self) -> None:
        if self.focal_x <= 0:
            raise ValueError(f"focal_x must be positive, got {self.focal_x}")
        if self.baseline <= 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")


@dataclass(frozen=True)
class CorrelationConfig:
    """Displacement grid of one correlation layer.

    Channel ``i`` samples displacement ``i * step_size`` (feature pixels) for
    ``i in range(channels)``. ``channels`` is fixed at construction because
    the convolutions consuming the correlation tensor depend on it.
    """

    max_displacement: float
    step_size: float
    channels: int
    output_stride: int

    def __post_init__(self) -> None:
        if self.max_displacement <= 0:
            raise ValueError("max_displacement must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.output_stride not in _ALLOWED_STRIDES:
            raise ValueError(
                f"output_stride must be one of {_ALLOWED_STRIDES}, got {self.output_stride}"
            )
        if round(self.max_displacement / self.step_size) != self.channels:
            raise ValueError(
                "inconsistent grid: channels must equal "
                "round(max_displacement / step_size); "
                f"got channels={self.channels}, "
                f"max_displacement/step_size={self.max_displacement / self.step_size:.6g}"
            )

    @classmethod
    def from_step_size(
        cls, max_displacement: float, step_size: float, output_stride: int
    ) -> "CorrelationConfig":
        """Build a config from a requested step size.

        The channel count is rounded to the nearest integer and the step size
        re-snapped to ``max_displacement / channels`` so the displacement grid
        tiles the range exactly.
        """
        if max_displacement <= 0 or step_size <= 0:
            raise ValueError("max_displacement and step_size must be positive")
        channels = max(1, round(max_displacement / step_size))
        return cls(max_displacement, max_displacement / channels, channels, output_stride)

    @classmethod
    def from_geometry(
        cls,
        intrinsics: CameraIntrinsics,
        z_min: float,
        output_stride: int,
        step_size: float = 1.0,
    ) -> "CorrelationConfig":
        """Build a config covering disparities down to a minimum scene depth."""
        d_max = compute_max_displacement(intrinsics, z_min, output_stride)
        return cls.from_step_size(d_max, step_size, output_stride)


@dataclass
class FeatureMap:
    """Feature tensor plus its downsampling ratio relative to the input image.

    ``values`` is (channels, h, w), (batch, channels, h, w), or any stack of
    such maps; the last two dimensions are spatial.
    """

    values: Tensor
    stride: int

    def __post_init__(self) -> None:
        if self.values.ndim < 3:
            raise ValueError(f"expected at least a 3D tensor, got ndim={self.values.ndim}")
        if self.values.shape[-1] < 1 or self.values.shape[-2] < 1:
            raise ValueError("feature maps must have height, width >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]


def compute_max_displacement(
    intrinsics: CameraIntrinsics, z_min: float, output_stride: int
) -> float:
    """Displacement steps needed at a feature stride to reach a minimum depth.

    A point at metric depth z has image disparity focal_x * baseline / z;
    dividing by the feature-map stride converts that to feature pixels, so the
    displacement budget is focal_x * baseline / (z_min * output_stride).
    """
    if z_min <= 0:
        raise ValueError(f"z_min must be positive, got {z_min}")
    if output_stride < 1:
        raise ValueError(f"output_stride must be >= 1, got {output_stride}")
    return intrinsics.focal_x * intrinsics.baseline / (z_min * output_stride)


def adapt_config(
    trained: CorrelationConfig,
    new_intrinsics: CameraIntrinsics,
    new_z_min: float,
) -> CorrelationConfig:
    """Re-target a trained displacement grid to new intrinsics / depth range.

    Keeps the channel count and output stride fixed (the rest of the network
    depends on them) and rescales the displacement range and step size. Since
    the correlation has no learnable parameters this needs no retraining.
    """
    new_d_max = compute_max_displacement(new_intrinsics, new_z_min, trained.output_stride)
    new_step = new_d_max / trained.channels
    if new_step <= 0:
        raise ValueError(f"adapted step size must be positive, got {new_step}")
    return CorrelationConfig(new_d_max, new_step, trained.channels, trained.output_stride)


def _values_of(f: Tensor | FeatureMap) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def _sample_columns(values: Tensor, offset: float) -> Tensor:
    """Resample along the last axis: out[..., x] = values[..., x + offset].

    Fractional offsets interpolate linearly between neighbouring columns;
    sample positions outside the map contribute exact zeros. Differentiable
    with respect to ``values``.
    """
    w = values.shape[-1]
    device = values.device
    pos = torch.arange(w, dtype=values.dtype, device=device) + offset
    lo = torch.floor(pos)
    frac = pos - lo
    lo = lo.long()
    hi = lo + 1
    lo_ok = ((lo >= 0) & (lo < w)).to(values.dtype)
    hi_ok = ((hi >= 0) & (hi < w)).to(values.dtype)
    lo_idx = lo.clamp(0, w - 1)
    hi_idx = hi.clamp(0, w - 1)
    low = values[..., lo_idx] * lo_ok
    high = values[..., hi_idx] * hi_ok
    return (1.0 - frac) * low + frac * high


def subpixel_horizontal_sample(f: Tensor | FeatureMap, shift: float) -> Tensor | FeatureMap:
    """Resample a feature map at horizontal offset ``shift`` (>= 0).

    out[..., x] = f[..., x + shift]; integer shifts reproduce exact column
    translation, fractional shifts interpolate linearly, and out-of-range
    samples are zero.
    """
    if shift < 0:
        raise ValueError(f"shift must be >= 0, got {shift}")
    values = _values_of(f)
    out = _sample_columns(values, float(shift))
    if isinstance(f, FeatureMap):
        return FeatureMap(out, f.stride)
    return out


def local_horizontal_correlation(
    f_a: Tensor | FeatureMap,
    f_b: Tensor | FeatureMap,
    config: CorrelationConfig,
    normalize: bool = False,
) -> Tensor:
    """Per-pixel inner products over a grid of horizontal displacements.

    Args:
        f_a: left feature map, (c, h, w) or (b, c, h, w).
        f_b: right feature map, same shape as ``f_a``.
        config: displacement grid.
        normalize: divide by the feature channel count (off by default; the
            raw inner product is the reference behaviour).

    Returns:
        Correlation tensor with ``config.channels`` channels and the spatial
        shape of the inputs; channel ``i`` at column x holds
        <f_a(x), f_b(x - i * step_size)>.
    """
    a = _values_of(f_a)
    b = _values_of(f_b)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes must match, got {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim not in (3, 4):
        raise ValueError(f"expected 3D or 4D features, got ndim={a.ndim}")
    if not torch.isfinite(a).all() or not torch.isfinite(b).all():
        raise ValueError("correlation inputs must be finite")

    channel_dim = a.ndim - 3
    outputs = []
    for i in range(config.channels):
        shifted = _sample_columns(b, -i * config.step_size)
        outputs.append((a * shifted).sum(dim=channel_dim))
    out = torch.stack(outputs, dim=channel_dim)
    if normalize:
        out = out / a.shape[channel_dim]
    return out


class CorrelationLayer(nn.Module):
    """Module wrapper so the displacement grid can be swapped after training.

    Holds no learnable parameters by construction.
    """

    def __init__(self, config: CorrelationConfig, normalize: bool = False):
        super().__init__()
        self.config = config
        self.normalize = normalize

    def forward(self, left_features: Tensor, right_features: Tensor) -> Tensor:
        return local_horizontal_correlation(
            left_features, right_features, self.config, self.normalize
        )

    def adapt(self, intrinsics: CameraIntrinsics, z_min: float) -> None:
        self.config = adapt_config(self.config, intrinsics, z_min)

    def extra_repr(self) -> str:
        c = self.config
        return (
            f"max_displacement={c.max_displacement:g}, step_size={c.step_size:g}, "
            f"channels={c.channels}, output_stride={c.output_stride}"
        )
