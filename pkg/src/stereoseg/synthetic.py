"""Procedural rectified stereo scenes with exact masks and disparity.

Scenes are layered 2D sprites: a textured background plane whose depth ramps
with the image row, plus randomly shaped objects at constant depth. Every
layer is described by continuous silhouette and texture functions, so the
right view is rendered by sampling the same functions at ``x + disparity``
rather than by resampling the left image. Compositing runs far to near in
both views, which yields visibility-resolved instance masks, exact per-pixel
disparity, and dis-occluded regions filled with background texture.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image

from .correlation import CameraIntrinsics

__all__ = [
    "SceneConfig",
    "StereoSample",
    "generate_dataset",
    "generate_scene",
    "read_dataset",
    "write_dataset",
]

DISPARITY_SCALE = 64  # stored disparity unit: 1/64 pixel


@dataclass(frozen=True)
class SceneConfig:
    height: int = 96
    width: int = 128
    min_objects: int = 1
    max_objects: int = 4
    z_near: float = 1.0
    z_far: float = 4.0
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(focal_x=240.0, baseline=0.05)
    )
    shapes: tuple[str, ...] = ("rectangle", "ellipse", "triangle")
    textures: tuple[str, ...] = ("flat", "gradient", "noise")
    background_mode: str = "textured_plane"
    seed: int = 0
    # objects occupy [z_near, z_near + object_z_band * (z_far - z_near)]; the
    # background plane ramps through the far remainder so it stays behind them
    object_z_band: float = 0.7
    min_object_frac: float = 0.16
    max_object_frac: float = 0.42
    low_contrast_fraction: float = 0.5
    min_visible_px: int = 30
    placement_retries: int = 8
    ramp_objects: bool = False  # per-object linear depth ramp over rows

    def __post_init__(self) -> None:
        if self.z_near <= 0:
            raise ValueError("z_near must be positive")
        if self.z_far <= self.z_near:
            raise ValueError("z_far must exceed z_near")
        if self.min_objects < 1:
            raise ValueError("min_objects must be >= 1")
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects must be >= min_objects")
        if not 0 < self.object_z_band < 1:
            raise ValueError("object_z_band must lie in (0, 1)")
        if self.height < 16 or self.width < 16:
            raise ValueError("image sides must be at least 16 px")


@dataclass
class StereoSample:
    """One rectified pair with ground truth in the left frame."""

    left: np.ndarray                 # (H, W, 3) float32 in [0, 1]
    right: np.ndarray                # (H, W, 3) float32 in [0, 1]
    masks: list[np.ndarray]          # pairwise-disjoint (H, W) bool arrays
    disparity: np.ndarray | None     # (H, W) float32 pixels, 0 = invalid
    intrinsics: CameraIntrinsics
    scene_id: str


_Texture = Callable[[np.ndarray, np.ndarray], np.ndarray]
_Silhouette = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class _Layer:
    disparity_rows: np.ndarray       # (H,) disparity per image row
    silhouette: _Silhouette
    texture: _Texture


def _quantize(d: np.ndarray | float) -> np.ndarray | float:
    return np.round(np.asarray(d) * DISPARITY_SCALE) / DISPARITY_SCALE


def _flat_texture(color: np.ndarray) -> _Texture:
    def tex(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return np.broadcast_to(color, xs.shape + (3,))

    return tex


def _gradient_texture(
    c0: np.ndarray, c1: np.ndarray, gx: float, gy: float, width: int, height: int
) -> _Texture:
    def tex(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        t = np.clip((gx * xs / width + gy * ys / height + 1.0) * 0.5, 0.0, 1.0)
        return c0 + t[..., None] * (c1 - c0)

    return tex


def _noise_texture(
    rng: np.random.Generator,
    base: np.ndarray,
    amplitude: float,
    cell: float,
    width: int,
    height: int,
) -> _Texture:
    """Low-frequency value noise: a coarse random grid, bilinearly sampled.

    The texture is piecewise linear at the cell scale, so resampling it at
    sub-pixel offsets stays within a small, bounded error.
    """
    gw = int(math.ceil(width / cell)) + 3
    gh = int(math.ceil(height / cell)) + 3
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw, 3))

    def tex(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        u = np.clip(xs / cell, 0.0, gw - 1.001)
        v = np.clip(ys / cell, 0.0, gh - 1.001)
        u0 = np.floor(u).astype(np.int64)
        v0 = np.floor(v).astype(np.int64)
        fu = (u - u0)[..., None]
        fv = (v - v0)[..., None]
        top = grid[v0, u0] * (1 - fu) + grid[v0, u0 + 1] * fu
        bottom = grid[v0 + 1, u0] * (1 - fu) + grid[v0 + 1, u0 + 1] * fu
        return np.clip(base + amplitude * (top * (1 - fv) + bottom * fv), 0.0, 1.0)

    return tex


def _make_texture(rng: np.random.Generator, mode: str, base: np.ndarray,
                  cfg: SceneConfig) -> _Texture:
    if mode == "flat":
        return _flat_texture(base)
    if mode == "gradient":
        angle = rng.uniform(0, 2 * math.pi)
        span = rng.uniform(0.08, 0.25)
        c0 = np.clip(base - span, 0.0, 1.0)
        c1 = np.clip(base + span, 0.0, 1.0)
        return _gradient_texture(c0, c1, math.cos(angle), math.sin(angle),
                                 cfg.width, cfg.height)
    if mode == "noise":
        # resampling the right view costs up to amplitude/cell per pixel, so
        # keep the noise smooth enough for sub-pixel photometric consistency
        amplitude = rng.uniform(0.04, 0.10)
        cell = rng.uniform(16.0, 24.0)
        return _noise_texture(rng, base, amplitude, cell, cfg.width, cfg.height)
    raise ValueError(f"unknown texture mode {mode!r}")


def _rectangle(x0: float, y0: float, w: float, h: float) -> _Silhouette:
    def inside(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)

    return inside


def _ellipse(x0: float, y0: float, w: float, h: float) -> _Silhouette:
    cx, cy = x0 + w / 2, y0 + h / 2
    rx, ry = w / 2, h / 2

    def inside(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0

    return inside


def _triangle(rng: np.random.Generator, x0: float, y0: float, w: float, h: float) -> _Silhouette:
    # resample until the triangle covers a reasonable part of its box
    for _ in range(16):
        pts = np.stack([
            x0 + rng.uniform(0, 1, 3) * w,
            y0 + rng.uniform(0, 1, 3) * h,
        ], axis=1)
        area = 0.5 * abs(
            (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
            - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
        )
        if area >= 0.25 * w * h:
            break

    def inside(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        result = np.ones_like(xs, dtype=bool)
        sign = None
        for i in range(3):
            ax, ay = pts[i]
            bx, by = pts[(i + 1) % 3]
            cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
            if sign is None:
                cx, cy = pts[(i + 2) % 3]
                sign = 1.0 if (bx - ax) * (cy - ay) - (by - ay) * (cx - ax) >= 0 else -1.0
            result &= sign * cross >= 0
        return result

    return inside


def _make_silhouette(rng: np.random.Generator, shape: str,
                     x0: float, y0: float, w: float, h: float) -> _Silhouette:
    if shape == "rectangle":
        return _rectangle(x0, y0, w, h)
    if shape == "ellipse":
        return _ellipse(x0, y0, w, h)
    if shape == "triangle":
        return _triangle(rng, x0, y0, w, h)
    raise ValueError(f"unknown shape {shape!r}")


@dataclass
class _ObjectDraw:
    """All per-object random decisions, drawn before any placement retries."""

    shape: str
    w: float
    h: float
    x0: float
    y0: float
    z: float
    texture: _Texture
    silhouette: _Silhouette = None  # type: ignore[assignment]

    def place(self, rng: np.random.Generator, cfg: SceneConfig) -> None:
        self.x0 = rng.uniform(1.0, cfg.width - self.w - 1.0)
        self.y0 = rng.uniform(1.0, cfg.height - self.h - 1.0)


def _object_disparity_rows(cfg: SceneConfig, rng: np.random.Generator,
                           z: float, d_lo: float, d_hi: float) -> np.ndarray:
    fb = cfg.intrinsics.focal_x * cfg.intrinsics.baseline
    d = fb / z
    rows = np.full(cfg.height, d)
    if cfg.ramp_objects:
        slope = rng.uniform(-0.5, 0.5)
        rows = d + slope * (np.arange(cfg.height) / cfg.height - 0.5)
    return np.clip(_quantize(rows), d_lo, d_hi)


def generate_scene(cfg: SceneConfig, seed: int | np.random.SeedSequence) -> StereoSample:
    """Render one deterministic stereo pair with ground truth.

    Objects are sampled with random shape, texture, size and depth; the left
    image composites them far to near, and the right image re-renders every
    layer shifted by its disparity. Infeasible placements are retried a
    bounded number of times, then dropped with a warning.
    """
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    fb = cfg.intrinsics.focal_x * cfg.intrinsics.baseline

    # disparity bounds, snapped inward to the stored quantization grid
    d_lo = math.ceil(fb / cfg.z_far * DISPARITY_SCALE) / DISPARITY_SCALE
    d_hi = math.floor(fb / cfg.z_near * DISPARITY_SCALE) / DISPARITY_SCALE

    z_obj_far = cfg.z_near + cfg.object_z_band * (cfg.z_far - cfg.z_near)
    z_bg_near = cfg.z_near + (cfg.object_z_band + 0.08) * (cfg.z_far - cfg.z_near)

    bg_base = rng.uniform(0.25, 0.75, size=3)
    bg_texture = _make_texture(rng, "noise", bg_base, cfg)
    bg_rows_z = np.linspace(cfg.z_far, z_bg_near, h)
    bg_rows = np.clip(_quantize(fb / bg_rows_z), d_lo, d_hi)
    background = _Layer(bg_rows, lambda xs, ys: np.ones_like(xs, dtype=bool), bg_texture)

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    draws: list[_ObjectDraw] = []
    for _ in range(count):
        shape = str(rng.choice(cfg.shapes))
        ow = rng.uniform(cfg.min_object_frac, cfg.max_object_frac) * w
        oh = rng.uniform(cfg.min_object_frac, cfg.max_object_frac) * h
        z = rng.uniform(cfg.z_near, z_obj_far)
        if rng.uniform() < cfg.low_contrast_fraction:
            base = np.clip(bg_base + rng.uniform(-0.14, 0.14, size=3), 0.05, 0.95)
        else:
            base = rng.uniform(0.1, 0.9, size=3)
        texture = _make_texture(rng, str(rng.choice(cfg.textures)), base, cfg)
        draw = _ObjectDraw(shape, ow, oh, 0.0, 0.0, z, texture)
        draw.place(rng, cfg)
        draws.append(draw)

    # far to near; paint order must not depend on the intrinsics
    order = sorted(range(count), key=lambda i: (-draws[i].z, i))

    def left_owner(kept: Sequence[int]) -> np.ndarray:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        owner = np.full((h, w), -1, dtype=np.int64)
        for rank, i in enumerate(k for k in order if k in kept):
            d = draws[i]
            owner[d.silhouette(xs, ys)] = i
        return owner

    for d in draws:
        d.silhouette = _make_silhouette(rng, d.shape, d.x0, d.y0, d.w, d.h)

    kept = set(range(count))
    for _ in range(cfg.placement_retries):
        owner = left_owner(kept)
        violators = [i for i in kept
                     if (owner == i).sum() < cfg.min_visible_px]
        if not violators:
            break
        for i in violators:
            draws[i].place(rng, cfg)
            draws[i].silhouette = _make_silhouette(
                rng, draws[i].shape, draws[i].x0, draws[i].y0, draws[i].w, draws[i].h
            )
    else:
        owner = left_owner(kept)
        dropped = [i for i in kept if (owner == i).sum() < cfg.min_visible_px]
        if dropped:
            warnings.warn(
                f"dropping {len(dropped)} object(s) without a feasible placement",
                stacklevel=2,
            )
            kept -= set(dropped)

    layers = [background]
    kept_order = [i for i in order if i in kept]
    for i in kept_order:
        d = draws[i]
        layers.append(_Layer(
            _object_disparity_rows(cfg, rng, d.z, d_lo, d_hi),
            d.silhouette,
            d.texture,
        ))

    def render(shifted: bool) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        image = np.zeros((h, w, 3), dtype=np.float64)
        owner = np.full((h, w), -1, dtype=np.int64)
        for idx, layer in enumerate(layers):
            sample_x = xs + layer.disparity_rows[:, None] if shifted else xs
            mask = layer.silhouette(sample_x, ys)
            image[mask] = layer.texture(sample_x, ys)[mask]
            owner[mask] = idx
        return image, owner

    left, owner = render(shifted=False)
    right, _ = render(shifted=True)

    masks = [owner == idx for idx in range(1, len(layers))]
    disparity = np.zeros((h, w), dtype=np.float64)
    for idx, layer in enumerate(layers):
        rows = np.broadcast_to(layer.disparity_rows[:, None], (h, w))
        disparity[owner == idx] = rows[owner == idx]

    seed_repr = seed if isinstance(seed, int) else "seq"
    return StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        masks=[m for m in masks if m.any()],
        disparity=disparity.astype(np.float32),
        intrinsics=cfg.intrinsics,
        scene_id=f"scene_{seed_repr}",
    )


def generate_dataset(cfg: SceneConfig, count: int,
                     master_seed: int | None = None) -> list[StereoSample]:
    """Generate ``count`` scenes with per-scene seeds derived from the master."""
    master = cfg.seed if master_seed is None else master_seed
    samples = []
    for index in range(count):
        seq = np.random.SeedSequence(entropy=master, spawn_key=(index,))
        sample = generate_scene(cfg, seq)
        sample.scene_id = f"scene_{index:06d}"
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# dataset layout: <root>/<scene_id>/{left.png, right.png, masks.png,
# disparity.png (optional), meta}
# ---------------------------------------------------------------------------


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_dataset(samples: Sequence[StereoSample], root: str | Path) -> None:
    """Write samples as 8-bit images, an indexed mask image and 1/64-px disparity."""
    root = Path(root)
    for sample in samples:
        scene_dir = root / sample.scene_id
        scene_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(sample.left)).save(scene_dir / "left.png")
        Image.fromarray(_to_uint8(sample.right)).save(scene_dir / "right.png")

        if len(sample.masks) > 255:
            raise ValueError("the indexed mask format supports at most 255 instances")
        indexed = np.zeros(sample.left.shape[:2], dtype=np.uint8)
        for i, mask in enumerate(sample.masks, start=1):
            indexed[mask] = i
        Image.fromarray(indexed).save(scene_dir / "masks.png")

        if sample.disparity is not None:
            stored = np.round(sample.disparity * DISPARITY_SCALE)
            if stored.max() > 65535:
                raise ValueError("disparity exceeds the 16-bit fixed-point range")
            Image.fromarray(stored.astype(np.uint16)).save(scene_dir / "disparity.png")

        h, w = sample.left.shape[:2]
        meta = (
            f"focal_x = {sample.intrinsics.focal_x!r}\n"
            f"baseline = {sample.intrinsics.baseline!r}\n"
            f"height = {h}\n"
            f"width = {w}\n"
        )
        (scene_dir / "meta").write_text(meta)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"dataset layout is missing {path}")
    return path


def _read_meta(path: Path) -> dict[str, float]:
    meta = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = float(value.strip())
    for key in ("focal_x", "baseline", "height", "width"):
        if key not in meta:
            raise ValueError(f"{path} is missing the {key!r} entry")
    return meta


def read_dataset(root: str | Path) -> Iterator[StereoSample]:
    """Yield samples from the directory layout, sorted by scene id.

    ``disparity.png`` may be absent (real captures without ground-truth
    disparity); ``disparity`` is then None. An empty root yields nothing.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        left = np.asarray(Image.open(_require(scene_dir / "left.png")), dtype=np.float32) / 255.0
        right = np.asarray(Image.open(_require(scene_dir / "right.png")), dtype=np.float32) / 255.0
        indexed = np.asarray(Image.open(_require(scene_dir / "masks.png")))
        meta = _read_meta(_require(scene_dir / "meta"))

        masks = [indexed == i for i in range(1, int(indexed.max()) + 1) if (indexed == i).any()]
        disparity = None
        disparity_path = scene_dir / "disparity.png"
        if disparity_path.exists():
            raw = np.asarray(Image.open(disparity_path)).astype(np.float32)
            disparity = raw / DISPARITY_SCALE

        yield StereoSample(
            left=left,
            right=right,
            masks=masks,
            disparity=disparity,
            intrinsics=CameraIntrinsics(meta["focal_x"], meta["baseline"]),
            scene_id=scene_dir.name,
        )
