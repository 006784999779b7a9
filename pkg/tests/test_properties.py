"""Property-based checks over randomly generated inputs."""

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stereoseg.correlation import CorrelationConfig, local_horizontal_correlation
from stereoseg.evaluation import match_and_score
from stereoseg.losses import LossWeights, dice_loss, exp_log_zero_mask_loss, segmentation_set_loss
from stereoseg.transformer import attention

unit_masks = arrays(
    np.float64, (4, 4), elements=st.floats(0.0, 1.0, allow_nan=False)
)


@settings(max_examples=30, deadline=None)
@given(y=unit_masks, pred=unit_masks)
def test_dice_loss_stays_in_unit_interval(y, pred):
    value = dice_loss(torch.from_numpy(y), torch.from_numpy(pred)).item()
    assert 0.0 <= value < 1.0


@settings(max_examples=30, deadline=None)
@given(pred=unit_masks, gamma=st.floats(0.05, 2.0))
def test_exp_log_zero_mask_loss_nonnegative_and_zero_at_empty(pred, gamma):
    value = exp_log_zero_mask_loss(torch.from_numpy(pred), gamma).item()
    assert value >= 0.0
    assert exp_log_zero_mask_loss(torch.zeros(4, 4), gamma).item() == 0.0


@settings(max_examples=20, deadline=None)
@given(
    data=arrays(np.float64, (2, 3, 4, 6), elements=st.floats(-3, 3, allow_nan=False)),
    scale=st.floats(-4.0, 4.0, allow_nan=False),
)
def test_correlation_is_linear_in_left_features(data, scale):
    cfg = CorrelationConfig.from_step_size(2.0, 0.5, 4)
    f_a, f_b = torch.from_numpy(data[0]), torch.from_numpy(data[1])
    base = local_horizontal_correlation(f_a, f_b, cfg)
    scaled = local_horizontal_correlation(scale * f_a, f_b, cfg)
    assert torch.allclose(scaled, scale * base, rtol=1e-9, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(
    logits=arrays(np.float64, (3, 4, 4), elements=st.floats(-4, 4, allow_nan=False)),
    order=st.permutations(range(2)),
)
def test_set_loss_invariant_to_gt_order(logits, order):
    gts = [torch.zeros(4, 4), torch.zeros(4, 4)]
    gts[0][:2, :2] = 1.0
    gts[1][2:, 2:] = 1.0
    weights = LossWeights()
    base = segmentation_set_loss([torch.from_numpy(logits)], gts, weights)
    permuted = segmentation_set_loss([torch.from_numpy(logits)], [gts[i] for i in order], weights)
    assert base.item() == permuted.item()


@settings(max_examples=20, deadline=None)
@given(
    qkv=arrays(np.float64, (3, 5, 4), elements=st.floats(-5, 5, allow_nan=False)),
)
def test_attention_rows_sum_to_one(qkv):
    q, k, v = (torch.from_numpy(qkv[i]) for i in range(3))
    _, weights = attention(q, k, v)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(5, dtype=torch.float64), atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_match_and_score_invariant_to_set_order(seed):
    rng = np.random.default_rng(seed)
    gts, preds = [], []
    for i in range(3):
        gt = np.zeros((16, 16), dtype=bool)
        r, c = rng.integers(0, 10, 2)
        gt[r : r + 6, c : c + 6] = True
        gts.append(gt)
        preds.append(gt ^ (rng.uniform(size=gt.shape) > 0.95))
    base = match_and_score(preds, gts)
    perm_p = rng.permutation(3)
    perm_g = rng.permutation(3)
    shuffled = match_and_score([preds[i] for i in perm_p], [gts[i] for i in perm_g])
    assert np.isclose(shuffled.miou, base.miou)
    assert np.isclose(shuffled.f1, base.f1)
