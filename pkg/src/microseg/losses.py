"""Dice + Focal training loss and F1 / IoU evaluation metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

FOCAL_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.9
    beta: float = 0.1
    dice_eps: float = 1.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"loss weights must be non-negative with a positive sum: {self}")


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def dice_loss(pred: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """Soft Dice over every pixel of the batch; ``pred`` holds probabilities."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1 - (2 * inter + eps) / (pred.sum() + target.sum() + eps)


def focal_loss(pred: Tensor, target: Tensor, gamma: float = 2.0) -> Tensor:
    _check_shapes(pred, target)
    p = pred.clamp(FOCAL_CLAMP, 1 - FOCAL_CLAMP)
    p_t = torch.where(target > 0.5, p, 1 - p)
    return (-(1 - p_t) ** gamma * torch.log(p_t)).mean()


def total_loss(pred: Tensor, target: Tensor, cfg: Optional[LossConfig] = None) -> Tensor:
    cfg = cfg or LossConfig()
    return cfg.alpha * dice_loss(pred, target, cfg.dice_eps) + cfg.beta * focal_loss(pred, target, cfg.focal_gamma)


def f1_iou(pred_mask, gt_mask) -> Tuple[float, float]:
    """F1 (Dice) and IoU for binary masks; two empty masks score (1, 1)."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    total = int(pred.sum()) + int(gt.sum())
    if union == 0:
        return 1.0, 1.0
    return 2 * inter / total, inter / union


@dataclass
class MetricReport:
    per_image: List[Tuple[str, float, float]] = field(default_factory=list)
    threshold: float = 0.5

    def add(self, image_id: str, pred_mask, gt_mask) -> Tuple[float, float]:
        f1, iou = f1_iou(pred_mask, gt_mask)
        self.per_image.append((image_id, f1, iou))
        return f1, iou

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r[1] for r in self.per_image])) if self.per_image else float("nan")

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r[2] for r in self.per_image])) if self.per_image else float("nan")

    def summary(self) -> dict:
        return {"n_images": len(self.per_image), "mean_f1": self.mean_f1, "mean_iou": self.mean_iou,
                "threshold": self.threshold}

    def write(self, out_dir, stem: str = "metrics") -> Tuple[Path, Path]:
        """Write ``<stem>.csv`` (image_id,f1,iou) and ``<stem>_summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table = out / f"{stem}.csv"
        with table.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "f1", "iou"])
            for image_id, f1, iou in self.per_image:
                w.writerow([image_id, f"{f1:.6f}", f"{iou:.6f}"])
        summary = out / f"{stem}_summary.json"
        summary.write_text(json.dumps(self.summary(), indent=2))
        return table, summary

    @classmethod
    def read(cls, table_path, threshold: float = 0.5) -> "MetricReport":
        with Path(table_path).open() as fh:
            rows = [(r["image_id"], float(r["f1"]), float(r["iou"])) for r in csv.DictReader(fh)]
        return cls(rows, threshold)
