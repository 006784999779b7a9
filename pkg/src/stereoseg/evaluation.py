"""Metrics over predicted and ground-truth mask sets, plus object-region depth.

Mask sets are compared after padding the smaller set with empty masks and
solving the IoU-maximizing assignment; padded (empty, empty) pairs are
excluded from the averages, while pairs of a real mask and padding count as
zero, so both misses and false positives are penalized. Per-pair F1 is the
pixel dice coefficient; a detection-style F1 (IoU >= 0.5 counts as a true
positive) is available behind a flag.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .correlation import CameraIntrinsics

__all__ = [
    "DepthScore",
    "EvalConfig",
    "ImageScore",
    "PairScore",
    "aggregate_scores",
    "binarize_predictions",
    "eval_depth_on_objects",
    "match_and_score",
    "write_report",
]


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    min_instance_area: float = 25.0        # pixels at the reference resolution
    reference_size: tuple[int, int] = (480, 640)
    matching: str = "maximize-iou"
    detection_f1: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.min_instance_area < 0:
            raise ValueError("min_instance_area must be >= 0")
        if self.matching != "maximize-iou":
            raise ValueError(f"unknown matching criterion {self.matching!r}")

    def effective_min_area(self, height: int, width: int) -> float:
        ref_h, ref_w = self.reference_size
        return self.min_instance_area * (height * width) / (ref_h * ref_w)


@dataclass
class PairScore:
    pred_index: int | None   # None for padding
    gt_index: int | None
    iou: float
    f1: float


@dataclass
class ImageScore:
    """Per-image averages over the counted (non padding-padding) pairs.

    ``miou`` and ``f1`` are None when there are no counted pairs at all
    (both sets empty); such images are skipped by the aggregate.
    """

    miou: float | None
    f1: float | None
    pair_count: int
    pairs: list[PairScore] = field(default_factory=list)
    detection_f1: float | None = None


@dataclass
class DepthScore:
    l1_mm: float
    rms_mm: float
    pixel_count: int


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def binarize_predictions(logits, cfg: EvalConfig) -> list[np.ndarray]:
    """Sigmoid + threshold each query map; drop masks below the minimum area.

    ``logits`` is (num_queries, H, W); returns the list of surviving boolean
    masks (the prediction set).
    """
    arr = _as_numpy(logits)
    if arr.ndim != 3:
        raise ValueError(f"expected (num_queries, H, W) logits, got {arr.shape}")
    clipped = np.clip(arr.astype(np.float64), -60.0, 60.0)
    probs = 1.0 / (1.0 + np.exp(-clipped))
    min_area = cfg.effective_min_area(arr.shape[1], arr.shape[2])
    masks = []
    for query in probs:
        mask = query > cfg.threshold
        if mask.sum() >= max(min_area, 1.0):
            masks.append(mask)
    return masks


def _pair_overlap(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    intersection = float(np.logical_and(pred, gt).sum())
    union = float(np.logical_or(pred, gt).sum())
    areas = float(pred.sum()) + float(gt.sum())
    iou = intersection / union if union > 0 else 0.0
    f1 = 2.0 * intersection / areas if areas > 0 else 0.0
    return iou, f1


def match_and_score(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    cfg: EvalConfig | None = None,
) -> ImageScore:
    """Pad the smaller set with empty masks and score the best assignment."""
    cfg = cfg or EvalConfig()
    n_pred, n_gt = len(preds), len(gts)
    size = max(n_pred, n_gt)
    if size == 0:
        return ImageScore(miou=None, f1=None, pair_count=0)

    iou = np.zeros((size, size))
    f1 = np.zeros((size, size))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            iou[i, j], f1[i, j] = _pair_overlap(_as_numpy(p).astype(bool),
                                                _as_numpy(g).astype(bool))
    rows, cols = linear_sum_assignment(-iou)

    pairs = []
    for i, j in zip(rows, cols):
        real_pred, real_gt = i < n_pred, j < n_gt
        if not real_pred and not real_gt:
            continue  # padding matched with padding: excluded from averages
        pairs.append(PairScore(
            pred_index=int(i) if real_pred else None,
            gt_index=int(j) if real_gt else None,
            iou=float(iou[i, j]) if real_pred and real_gt else 0.0,
            f1=float(f1[i, j]) if real_pred and real_gt else 0.0,
        ))

    score = ImageScore(
        miou=float(np.mean([p.iou for p in pairs])),
        f1=float(np.mean([p.f1 for p in pairs])),
        pair_count=len(pairs),
        pairs=pairs,
    )
    if cfg.detection_f1:
        tp = sum(1 for p in pairs
                 if p.pred_index is not None and p.gt_index is not None and p.iou >= 0.5)
        denominator = 2 * tp + (n_pred - tp) + (n_gt - tp)
        score.detection_f1 = 2.0 * tp / denominator if denominator > 0 else 1.0
    return score


def eval_depth_on_objects(
    pred_disparity,
    gt_disparity,
    gt_masks: Sequence[np.ndarray],
    intrinsics: CameraIntrinsics,
) -> DepthScore | None:
    """L1 and RMS metric depth error (mm) on the union of object pixels.

    Pixels with invalid (zero) ground-truth disparity are discarded. Returns
    None (with a warning) when no valid object pixel remains.
    """
    pred = _as_numpy(pred_disparity).astype(np.float64)
    gt = _as_numpy(gt_disparity).astype(np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")

    region = np.zeros(gt.shape, dtype=bool)
    for mask in gt_masks:
        region |= _as_numpy(mask).astype(bool)
    region &= gt > 0
    if not region.any():
        warnings.warn("no valid object pixels for depth evaluation", stacklevel=2)
        return None

    fb = intrinsics.focal_x * intrinsics.baseline
    z_pred = fb / np.clip(pred[region], 1e-6, None)
    z_gt = fb / gt[region]
    diff_mm = (z_pred - z_gt) * 1000.0
    return DepthScore(
        l1_mm=float(np.abs(diff_mm).mean()),
        rms_mm=float(np.sqrt((diff_mm ** 2).mean())),
        pixel_count=int(region.sum()),
    )


def aggregate_scores(scores: Sequence[ImageScore]) -> dict:
    """Unweighted mean of the defined per-image scores."""
    mious = [s.miou for s in scores if s.miou is not None]
    f1s = [s.f1 for s in scores if s.f1 is not None]
    return {
        "images": len(scores),
        "scored_images": len(mious),
        "miou": float(np.mean(mious)) if mious else None,
        "f1": float(np.mean(f1s)) if f1s else None,
    }


def write_report(
    records: Sequence[dict],
    summary: dict,
    summary_path: str | Path,
) -> Path:
    """Write per-image records (JSON lines) next to a machine-readable summary.

    The line-delimited file gets the same stem with a ``.jsonl`` suffix;
    returns its path.
    """
    summary_path = Path(summary_path)
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    records_path = summary_path.with_suffix(".jsonl")
    with records_path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return records_path
