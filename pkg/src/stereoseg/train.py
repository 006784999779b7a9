"""Training loop, checkpointing, inference and dataset evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from .config import (
    TrainConfig,
    attention_config,
    build_correlation_configs,
    config_from_dict,
    config_to_dict,
    encoder_config,
)
from .correlation import CameraIntrinsics, CorrelationConfig, adapt_config
from .evaluation import (
    EvalConfig,
    aggregate_scores,
    binarize_predictions,
    eval_depth_on_objects,
    match_and_score,
    write_report,
)
from .losses import total_loss
from .network import StereoInstanceNet
from .synthetic import DISPARITY_SCALE, StereoSample, read_dataset

__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "adapt_checkpoint",
    "build_model",
    "evaluate_checkpoint",
    "evaluate_model",
    "infer",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def build_model(cfg: TrainConfig) -> StereoInstanceNet:
    corr1, corr2 = build_correlation_configs(cfg)
    return StereoInstanceNet(
        encoder_config(cfg),
        attention_config(cfg),
        corr1,
        corr2,
        decoder_widths=tuple(cfg.decoder_widths),
    )


def save_checkpoint(
    path: str | Path,
    model: StereoInstanceNet,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    step: int = 0,
) -> Path:
    corr1, corr2 = model.correlation_configs
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng_state": torch.get_rng_state(),
        "epoch": epoch,
        "step": step,
        "correlation": {
            "corr1": dataclasses.asdict(corr1),
            "corr2": dataclasses.asdict(corr2),
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version!r}; "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def model_from_checkpoint(payload: dict) -> tuple[StereoInstanceNet, TrainConfig]:
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg)
    stored = payload.get("correlation")
    if stored:
        model.set_correlation_configs(
            CorrelationConfig(**stored["corr1"]), CorrelationConfig(**stored["corr2"])
        )
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


def adapt_checkpoint(
    payload: dict, intrinsics: CameraIntrinsics, z_min: float
) -> dict:
    """Return a checkpoint copy whose correlation grids target new intrinsics."""
    stored = payload["correlation"]
    adapted = dict(payload)
    adapted["correlation"] = {
        name: dataclasses.asdict(
            adapt_config(CorrelationConfig(**stored[name]), intrinsics, z_min)
        )
        for name in ("corr1", "corr2")
    }
    return adapted


class SceneDataset(Dataset):
    """Eagerly loaded dataset of generated (or generator-format) scenes."""

    def __init__(self, root: str | Path, max_instances: int | None = None):
        self.samples: list[StereoSample] = []
        self.skipped_overflow = 0
        for sample in read_dataset(root):
            if max_instances is not None and len(sample.masks) > max_instances:
                self.skipped_overflow += 1
                continue
            self.samples.append(sample)
        if self.skipped_overflow:
            warnings.warn(
                f"skipped {self.skipped_overflow} sample(s) with more instances "
                f"than the query count {max_instances}",
                stacklevel=2,
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict:
        s = self.samples[index]
        item = {
            "left": torch.from_numpy(s.left).permute(2, 0, 1),
            "right": torch.from_numpy(s.right).permute(2, 0, 1),
            "masks": [torch.from_numpy(m.astype(np.float32)) for m in s.masks],
            "scene_id": s.scene_id,
        }
        if s.disparity is not None:
            item["disparity"] = torch.from_numpy(s.disparity)
            item["disparity_valid"] = torch.from_numpy((s.disparity > 0).astype(np.float32))
        return item


def _collate(batch: list[dict]) -> dict:
    out = {
        "left": torch.stack([b["left"] for b in batch]),
        "right": torch.stack([b["right"] for b in batch]),
        "masks": [b["masks"] for b in batch],
        "scene_ids": [b["scene_id"] for b in batch],
    }
    if all("disparity" in b for b in batch):
        out["disparity"] = torch.stack([b["disparity"] for b in batch])
        out["disparity_valid"] = torch.stack([b["disparity_valid"] for b in batch])
    return out


def _split_dirs(data_dir: str | Path) -> tuple[Path, Path | None]:
    data_dir = Path(data_dir)
    train_dir = data_dir / "train"
    val_dir = data_dir / "val"
    if train_dir.is_dir():
        return train_dir, (val_dir if val_dir.is_dir() else None)
    return data_dir, None


def _batch_loss(model_output, batch, cfg: TrainConfig):
    weights = cfg.weights()
    totals, segs, hubs = [], [], []
    per_layer_sums = None
    batch_size = batch["left"].shape[0]
    for b in range(batch_size):
        per_layer = [logits[b] for logits in model_output.mask_logits]
        breakdown = total_loss(
            per_layer,
            batch["masks"][b],
            model_output.disparity[b] if "disparity" in batch else None,
            batch["disparity"][b] if "disparity" in batch else None,
            weights,
            disparity_valid=batch.get("disparity_valid", [None] * batch_size)[b]
            if "disparity" in batch else None,
            huber_delta=cfg.huber_delta,
        )
        totals.append(breakdown.total)
        segs.append(breakdown.segmentation)
        hubs.append(breakdown.disparity)
        layer_vals = [v.detach() for v in breakdown.segmentation_per_layer]
        if per_layer_sums is None:
            per_layer_sums = layer_vals
        else:
            per_layer_sums = [a + b_ for a, b_ in zip(per_layer_sums, layer_vals)]

    n = float(batch_size)
    return (
        torch.stack(totals).mean(),
        torch.stack(segs).mean(),
        torch.stack(hubs).mean(),
        [float(v) / n for v in per_layer_sums],
    )


def train(
    cfg: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Path:
    """Run the epoch loop and return the path of the final checkpoint.

    Writes ``train_log.jsonl`` (one structured record per step with the
    per-layer segmentation and disparity components) and periodic checkpoints
    under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    train_dir, val_dir = _split_dirs(data_dir)
    dataset = SceneDataset(train_dir, max_instances=cfg.num_queries)
    if len(dataset) == 0:
        raise ValueError(f"no training samples found under {train_dir}")

    # eps below the default so consistent but tiny gradients (queries waking
    # from a near-saturated state) still translate into real steps
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, eps=1e-10
    )
    start_epoch, step = 0, 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model, _ = model_from_checkpoint(payload)
        if payload["optimizer_state"] is not None:
            optimizer = torch.optim.AdamW(
                model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, eps=1e-10
            )
            optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        start_epoch = payload["epoch"]
        step = payload["step"]

    model.train()
    log_path = out_dir / "train_log.jsonl"
    log_mode = "a" if resume_from is not None else "w"
    final_path = out_dir / "checkpoint_final.pt"

    with log_path.open(log_mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            loader = DataLoader(
                dataset,
                batch_size=cfg.batch_size,
                shuffle=True,
                collate_fn=_collate,
                num_workers=0,
                generator=torch.Generator().manual_seed(cfg.seed * 100_003 + epoch),
            )
            for batch in loader:
                right = batch["left"] if cfg.single_rgb else batch["right"]
                output = model(batch["left"], right, decode_aux_masks=True)
                outputs_finite = torch.isfinite(output.disparity).all() and all(
                    torch.isfinite(m).all() for m in output.mask_logits
                )
                if outputs_finite:
                    loss, seg, hub, per_layer = _batch_loss(output, batch, cfg)
                if not outputs_finite or not torch.isfinite(loss):
                    record = {
                        "event": "non_finite_loss",
                        "step": step,
                        "epoch": epoch,
                        "scene_ids": batch["scene_ids"],
                    }
                    log.write(json.dumps(record) + "\n")
                    raise RuntimeError(
                        f"non-finite loss at step {step}; offending batch: "
                        f"{batch['scene_ids']}"
                    )
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "total": float(loss.detach()),
                    "segmentation": float(seg.detach()),
                    "disparity": float(hub.detach()),
                }
                for j, value in enumerate(per_layer):
                    record[f"segmentation_layer_{j}"] = value
                log.write(json.dumps(record) + "\n")
                step += 1

            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_epoch{epoch + 1:03d}.pt",
                    model, cfg, optimizer, epoch + 1, step,
                )
            if val_dir is not None and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
                metrics = _validate(model, cfg, val_dir)
                metrics.update({"event": "validation", "epoch": epoch + 1, "step": step})
                log.write(json.dumps(metrics) + "\n")
                logger.info("validation after epoch %d: %s", epoch + 1, metrics)
                model.train()

    save_checkpoint(final_path, model, cfg, optimizer, cfg.epochs, step)
    return final_path


def _validate(model: StereoInstanceNet, cfg: TrainConfig, val_dir: Path) -> dict:
    eval_cfg = EvalConfig()
    scores, depth_l1 = [], []
    model.eval()
    with torch.no_grad():
        for sample in read_dataset(val_dir):
            masks, disparity = _infer_arrays(model, cfg, sample)
            preds = binarize_predictions(masks, eval_cfg)
            scores.append(match_and_score(preds, sample.masks, eval_cfg))
            if sample.disparity is not None:
                score = eval_depth_on_objects(
                    disparity, sample.disparity, sample.masks, sample.intrinsics
                )
                if score is not None:
                    depth_l1.append(
                        float(np.abs(disparity - sample.disparity)[
                            np.logical_or.reduce([m for m in sample.masks])
                            & (sample.disparity > 0)
                        ].mean())
                    )
    summary = aggregate_scores(scores)
    if depth_l1:
        summary["disparity_l1_px"] = float(np.mean(depth_l1))
    return summary


def _to_batch(image: np.ndarray) -> Tensor:
    return torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)


def _infer_arrays(
    model: StereoInstanceNet, cfg: TrainConfig, sample: StereoSample
) -> tuple[np.ndarray, np.ndarray]:
    left = _to_batch(sample.left)
    right = left if cfg.single_rgb else _to_batch(sample.right)
    output = model(left, right, decode_aux_masks=False)
    return (
        output.mask_logits[-1][0].detach().numpy(),
        output.disparity[0].detach().numpy(),
    )


def infer(
    checkpoint: str | Path | dict,
    left: np.ndarray,
    right: np.ndarray,
    new_intrinsics: CameraIntrinsics | None = None,
    z_min: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward one pair; optionally re-target the correlation grids first.

    Returns (mask logits (n_q, H, W), disparity (H, W)). When new intrinsics
    are given, ``z_min`` defaults to the trained value and both correlation
    configs are adapted before the forward pass.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    model, cfg = model_from_checkpoint(payload)
    if new_intrinsics is not None:
        model.adapt_intrinsics(new_intrinsics, cfg.z_min if z_min is None else z_min)
    h, w = left.shape[:2]
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")
    if left.shape != right.shape:
        raise ValueError("left and right images must have the same shape")
    with torch.no_grad():
        left_t = _to_batch(left)
        right_t = left_t if cfg.single_rgb else _to_batch(right)
        output = model(left_t, right_t, decode_aux_masks=False)
    return (
        output.mask_logits[-1][0].numpy(),
        output.disparity[0].numpy(),
    )


def evaluate_checkpoint(
    checkpoint: str | Path | dict,
    data_dir: str | Path,
    eval_cfg: EvalConfig | None = None,
    report_path: str | Path | None = None,
) -> tuple[dict, list[dict]]:
    """Score a checkpoint over a dataset; optionally write the report files."""
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    model, cfg = model_from_checkpoint(payload)
    return evaluate_model(model, cfg, data_dir, eval_cfg, report_path)


def evaluate_model(
    model,
    cfg: TrainConfig,
    data_dir: str | Path,
    eval_cfg: EvalConfig | None = None,
    report_path: str | Path | None = None,
) -> tuple[dict, list[dict]]:
    """Score any model exposing the forward contract over a dataset."""
    eval_cfg = eval_cfg or EvalConfig()
    records: list[dict] = []
    scores = []
    depth_l1, depth_rms = [], []
    with torch.no_grad():
        for sample in read_dataset(data_dir):
            mask_logits, disparity = _infer_arrays(model, cfg, sample)
            preds = binarize_predictions(mask_logits, eval_cfg)
            score = match_and_score(preds, sample.masks, eval_cfg)
            scores.append(score)
            record = {
                "image": sample.scene_id,
                "miou": score.miou,
                "f1": score.f1,
                "pairs": score.pair_count,
            }
            if sample.disparity is not None:
                depth = eval_depth_on_objects(
                    disparity, sample.disparity, sample.masks, sample.intrinsics
                )
                if depth is not None:
                    record["depth_l1_mm"] = depth.l1_mm
                    record["depth_rms_mm"] = depth.rms_mm
                    depth_l1.append(depth.l1_mm)
                    depth_rms.append(depth.rms_mm)
                region = np.logical_or.reduce(
                    [m for m in sample.masks] or [np.zeros_like(sample.disparity, bool)]
                ) & (sample.disparity > 0)
                if region.any():
                    record["disparity_l1_px"] = float(
                        np.abs(disparity - sample.disparity)[region].mean()
                    )
            records.append(record)

    summary = aggregate_scores(scores)
    if depth_l1:
        summary["depth_l1_mm"] = float(np.mean(depth_l1))
        summary["depth_rms_mm"] = float(np.mean(depth_rms))
    px = [r["disparity_l1_px"] for r in records if "disparity_l1_px" in r]
    if px:
        summary["disparity_l1_px"] = float(np.mean(px))
    if report_path is not None:
        write_report(records, summary, report_path)
    return summary, records


def write_inference_outputs(
    out_dir: str | Path,
    mask_logits: np.ndarray,
    disparity: np.ndarray,
    eval_cfg: EvalConfig | None = None,
) -> None:
    """Write binarized masks (indexed PNG) and 16-bit disparity."""
    from PIL import Image

    eval_cfg = eval_cfg or EvalConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = binarize_predictions(mask_logits, eval_cfg)
    indexed = np.zeros(disparity.shape, dtype=np.uint8)
    for i, mask in enumerate(masks, start=1):
        indexed[mask & (indexed == 0)] = i
    Image.fromarray(indexed).save(out_dir / "masks.png")
    stored = np.clip(np.round(disparity * DISPARITY_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(stored).save(out_dir / "disparity.png")
