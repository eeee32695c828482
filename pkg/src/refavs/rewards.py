"""Format / IoU / class rewards, combined with unit coefficients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .domain import ClassLabel, check_mask_pair, ends_with_seg, parse_final_answer


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    iou: float
    cls: float
    total: float


def format_reward(path) -> float:
    return 1.0 if ends_with_seg(path) else 0.0


def iou_reward(pred: Optional[np.ndarray], gt: np.ndarray) -> float:
    """IoU of thresholded prediction and ground truth; 0 when no mask was produced."""
    if pred is None:
        return 0.0
    p, g = check_mask_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def class_reward(path, gt_class: ClassLabel | str) -> float:
    name = gt_class.name if isinstance(gt_class, ClassLabel) else gt_class
    return 1.0 if parse_final_answer(path) == name else 0.0


def total_reward(format: float, iou: float, cls: float) -> RewardBreakdown:
    if format not in (0, 1) or cls not in (0, 1):
        raise ValueError(f"format and class rewards must be 0 or 1, got {format}, {cls}")
    if not 0.0 <= iou <= 1.0:
        raise ValueError(f"iou reward must lie in [0, 1], got {iou}")
    return RewardBreakdown(float(format), float(iou), float(cls), 1.0 * format + 1.0 * iou + 1.0 * cls)


def score_path(tokens, pred_mask: Optional[np.ndarray], gt_mask: np.ndarray, gt_class) -> RewardBreakdown:
    """Reward triplet for one decoded path; ``pred_mask`` is None when [SEG] never appeared."""
    fmt = format_reward(tokens)
    iou = iou_reward(pred_mask, gt_mask)
    return total_reward(fmt, iou, class_reward(tokens, gt_class))
