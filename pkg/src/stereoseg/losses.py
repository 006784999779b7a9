"""Permutation-invariant set loss for mask prediction plus the disparity term.

Predicted masks are matched to ground truth by minimum total dice cost
(Hungarian assignment, ground truth padded with zero masks). Matched pairs
with a real target contribute plain dice loss; pairs matched to a zero mask
contribute an exponential-logarithmic penalty on the dice score, which is
zero for a perfectly empty prediction and grows with the predicted area.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

__all__ = [
    "LossBreakdown",
    "LossWeights",
    "MatchResult",
    "dice_loss",
    "exp_log_zero_mask_loss",
    "hungarian_match",
    "huber_loss",
    "mask_probabilities",
    "pad_with_zero_masks",
    "pairwise_dice_cost",
    "per_query_segmentation_losses",
    "segmentation_set_loss",
    "total_loss",
]

# Logits are clamped before the sigmoid in every mask loss. The bound serves
# two purposes: float32 sigmoid underflows to exactly 0 below -88 (turning
# the zero-mask penalty's pow backward into inf * 0), and more importantly a
# tight bound stops the loss from rewarding ever-deeper saturation, keeping
# suppressed queries within a recoverable gradient range instead of letting
# a few early winners silence the rest of the set permanently.
LOGIT_CLAMP = 16.0


def mask_probabilities(logits: Tensor) -> Tensor:
    """Sigmoid of clamped logits, as used by every mask loss."""
    return torch.sigmoid(logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


@dataclass(frozen=True)
class LossWeights:
    """Weighting of the total loss.

    alpha scales the disparity term, beta the segmentation term, and gamma is
    the exponent of the zero-mask penalty.
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.2

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


@dataclass
class MatchResult:
    """Minimum-cost assignment between queries and (padded) targets.

    ``assignment`` pairs every query index with a target index; targets with
    index >= num_real are zero-mask padding. ``costs`` holds the dice cost of
    each pair, ordered like ``assignment``.
    """

    assignment: list[tuple[int, int]]
    costs: list[float]
    num_real: int
    targets: Tensor = field(repr=False)


def _check_unit_range(x: Tensor, name: str) -> None:
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")


def dice_loss(target: Tensor, pred: Tensor) -> Tensor:
    """1 - (2*sum(target*pred) + 1) / (sum(target) + sum(pred) + 1).

    Sums run over all pixels; the +1 smoothing acts on the summed quantities,
    so the loss of two empty masks is exactly zero.
    """
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(pred.shape)}")
    _check_unit_range(target, "target")
    _check_unit_range(pred, "pred")
    intersection = (target * pred).sum()
    return 1.0 - (2.0 * intersection + 1.0) / (target.sum() + pred.sum() + 1.0)


def exp_log_zero_mask_loss(pred: Tensor, gamma: float) -> Tensor:
    """Penalty for predictions matched to an all-zero target.

    Equals (-log(dice score))**gamma; against a zero target the dice score is
    1 / (sum(pred) + 1), so this reduces to log1p(sum(pred))**gamma: exactly 0
    for an empty prediction and increasing in the predicted area.

    The gradient of x**gamma diverges as x -> 0 for gamma < 1, so an exactly
    empty prediction short-circuits to 0 and the power's base is floored;
    without this, a query whose mask saturates to zero poisons training with
    inf * 0 gradients.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    _check_unit_range(pred, "pred")
    total = pred.sum()
    if float(total.detach()) == 0.0:
        return total * 0.0
    return torch.log1p(total).clamp_min(1e-30) ** gamma


def pad_with_zero_masks(masks: Sequence[Tensor], count: int, shape: tuple[int, int],
                        dtype: torch.dtype = torch.float32,
                        device: torch.device | None = None) -> Tensor:
    """Stack masks and append all-zero masks until ``count`` entries."""
    if len(masks) > count:
        raise ValueError(f"got {len(masks)} masks but only room for {count}")
    if len(masks):
        stack = torch.stack([m.to(dtype) for m in masks])
        device = stack.device
    else:
        stack = torch.zeros((0, *shape), dtype=dtype, device=device)
    pad = torch.zeros((count - len(masks), *shape), dtype=dtype, device=device)
    return torch.cat([stack, pad])


def pairwise_dice_cost(pred: Tensor, target: Tensor) -> Tensor:
    """Dice cost of every (query, target) pair.

    pred is (n, h, w) of probabilities, target (m, h, w); returns (n, m).
    """
    pred_flat = pred.flatten(1)
    target_flat = target.flatten(1)
    intersection = pred_flat @ target_flat.t()
    pred_area = pred_flat.sum(dim=1, keepdim=True)
    target_area = target_flat.sum(dim=1, keepdim=True).t()
    return 1.0 - (2.0 * intersection + 1.0) / (pred_area + target_area + 1.0)


def hungarian_match(pred: Tensor, gt_masks: Sequence[Tensor]) -> MatchResult:
    """Assign each query to a ground-truth (or padding) mask at minimum cost.

    Args:
        pred: (num_queries, h, w) mask probabilities.
        gt_masks: up to num_queries binary masks of shape (h, w).

    The ground truth is padded with zero masks to num_queries entries; the
    cost of a pair is its dice loss (against a zero mask this degrades to
    1 - 1/(sum(pred)+1)). The assignment is treated as a constant: no
    gradients flow through the matching.
    """
    num_queries = pred.shape[0]
    if len(gt_masks) > num_queries:
        raise ValueError(
            f"{len(gt_masks)} ground-truth instances exceed the query count "
            f"{num_queries}; raise num_queries to at least the maximum "
            "instance count per image"
        )
    targets = pad_with_zero_masks(
        list(gt_masks), num_queries, tuple(pred.shape[-2:]),
        dtype=pred.dtype, device=pred.device,
    )
    with torch.no_grad():
        cost = pairwise_dice_cost(pred, targets)
        # deterministic tie-break: among (near-)equally cheap options, padding
        # goes to the highest query indices, so a real target that no query
        # claims yet lands on the same low-index query every step instead of
        # churning across all of them
        solver_cost = cost.clone()
        if len(gt_masks) < num_queries:
            index_bias = 1e-9 * torch.arange(
                num_queries, dtype=cost.dtype, device=cost.device
            )
            solver_cost[:, len(gt_masks):] -= index_bias[:, None]
    rows, cols = linear_sum_assignment(solver_cost.detach().cpu().numpy())
    order = np.argsort(rows)  # lowest query index first
    assignment = [(int(rows[i]), int(cols[i])) for i in order]
    costs = [float(cost[q, t]) for q, t in assignment]
    return MatchResult(assignment, costs, len(gt_masks), targets)


def per_query_segmentation_losses(
    pred: Tensor,
    targets: Tensor,
    assignment: Sequence[tuple[int, int]],
    gamma: float,
) -> Tensor:
    """Loss of each matched pair, ordered by query index.

    Pairs whose target has nonzero area contribute dice loss; pairs matched
    to a zero mask contribute the exponential-logarithmic penalty. Keeping the
    assignment fixed makes this differentiable in ``pred`` alone.
    """
    losses = []
    for q, t in sorted(assignment):
        target = targets[t]
        if target.sum() != 0:
            losses.append(dice_loss(target, pred[q]))
        else:
            losses.append(exp_log_zero_mask_loss(pred[q], gamma))
    return torch.stack(losses)


def segmentation_set_loss(
    per_layer_logits: Sequence[Tensor],
    gt_masks: Sequence[Tensor],
    weights: LossWeights,
) -> Tensor:
    """Matched mask loss summed over queries and decoder layers, times beta.

    Each entry of ``per_layer_logits`` is a (num_queries, h, w) logit tensor;
    the matching is recomputed per layer on the sigmoided masks.
    """
    total = None
    for logits in per_layer_logits:
        probs = mask_probabilities(logits)
        match = hungarian_match(probs, gt_masks)
        layer = per_query_segmentation_losses(
            probs, match.targets, match.assignment, weights.gamma
        ).sum()
        total = layer if total is None else total + layer
    if total is None:
        raise ValueError("need at least one decoder layer of mask logits")
    return weights.beta * total


def huber_loss(
    pred: Tensor,
    target: Tensor,
    valid: Tensor | None = None,
    delta: float = 1.0,
) -> Tensor:
    """Mean Huber penalty over valid pixels.

    0.5*e**2 where |e| <= delta, else delta*(|e| - 0.5*delta). Pixels with
    valid == 0 are excluded; an empty valid set yields 0 with a warning.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    error = pred - target
    abs_error = error.abs()
    per_pixel = torch.where(
        abs_error <= delta, 0.5 * error * error, delta * (abs_error - 0.5 * delta)
    )
    if valid is None:
        return per_pixel.mean()
    valid = valid.to(per_pixel.dtype)
    count = valid.sum()
    if count == 0:
        warnings.warn("huber_loss: no valid pixels, returning 0", stacklevel=2)
        return torch.zeros((), dtype=pred.dtype, device=pred.device)
    return (per_pixel * valid).sum() / count


@dataclass
class LossBreakdown:
    """Total loss and its components for one sample."""

    total: Tensor
    segmentation: Tensor            # beta * sum over layers and queries
    segmentation_per_layer: list[Tensor]  # unweighted per-layer sums
    disparity: Tensor               # unweighted Huber term


def total_loss(
    per_layer_mask_logits: Sequence[Tensor],
    gt_masks: Sequence[Tensor],
    pred_disparity: Tensor | None,
    gt_disparity: Tensor | None,
    weights: LossWeights,
    disparity_valid: Tensor | None = None,
    huber_delta: float = 1.0,
) -> LossBreakdown:
    """alpha * huber + beta * (matched mask loss summed over layers, queries).

    The disparity term is skipped (contributes 0) when no ground-truth
    disparity is available.
    """
    layer_losses = []
    for logits in per_layer_mask_logits:
        probs = mask_probabilities(logits)
        match = hungarian_match(probs, gt_masks)
        layer_losses.append(
            per_query_segmentation_losses(
                probs, match.targets, match.assignment, weights.gamma
            ).sum()
        )
    seg = weights.beta * torch.stack(layer_losses).sum()

    if gt_disparity is not None and pred_disparity is not None:
        hub = huber_loss(pred_disparity, gt_disparity, disparity_valid, huber_delta)
    else:
        hub = torch.zeros_like(seg)
    return LossBreakdown(
        total=weights.alpha * hub + seg,
        segmentation=seg,
        segmentation_per_layer=layer_losses,
        disparity=hub,
    )
