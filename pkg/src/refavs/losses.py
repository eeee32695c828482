"""Training losses and the per-stage unit-weight compositions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1.0


@dataclass
class LossReport:
    total: object
    components: dict = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        def f(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        out = {"loss_total": f(self.total)}
        out.update({k: f(v) for k, v in self.components.items()})
        return out


def sft_loss(logits: torch.Tensor, targets: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean next-token NLL over target positions.

    Accepts ``(L, V)``/``(L,)`` or batched ``(B, L, V)``/``(B, L)``; batched
    inputs average per sequence first, then over the batch.
    """
    if logits.dim() == 2:
        logits, targets = logits[None], targets[None]
    if logits.shape[:2] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not align with targets {tuple(targets.shape)}")
    B, L, _ = logits.shape
    if lengths is None:
        lengths = torch.full((B,), L, dtype=torch.long)
    valid = torch.arange(L)[None] < lengths[:, None]
    nll = -logits.log_softmax(-1).gather(-1, targets.clamp(min=0)[..., None])[..., 0]
    nll = torch.where(valid, nll, torch.zeros((), dtype=nll.dtype))
    return (nll.sum(1) / lengths.to(nll.dtype)).mean()


def distill_loss(f_t: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """MSE between teacher and student [SEG] embeddings; the teacher side is detached."""
    if f_t.shape != f_s.shape:
        raise ValueError(f"embedding shape mismatch: {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    return ((f_t.detach() - f_s) ** 2).mean()


def _check_shapes(mask_logits, gt):
    if mask_logits.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {tuple(mask_logits.shape)} vs {tuple(gt.shape)}")


def bce_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    _check_shapes(mask_logits, gt_mask)
    return F.binary_cross_entropy_with_logits(mask_logits, gt_mask.to(mask_logits.dtype))


def dice_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """1 - (2 sum(p g) + 1) / (sum p + sum g + 1) per mask, averaged over a leading batch."""
    _check_shapes(mask_logits, gt_mask)
    p = torch.sigmoid(mask_logits)
    g = gt_mask.to(p.dtype)
    if p.dim() == 2:
        p, g = p[None], g[None]
    p, g = p.flatten(1), g.flatten(1)
    num = 2 * (p * g).sum(1) + DICE_SMOOTH
    den = p.sum(1) + g.sum(1) + DICE_SMOOTH
    return (1 - num / den).mean()


def stage1_total(ce, bce, dice, dis) -> LossReport:
    return LossReport(ce + bce + dice + dis, {"ce": ce, "bce": bce, "dice": dice, "dis": dis})


def stage2_total(ce, bce, dice) -> LossReport:
    return LossReport(ce + bce + dice, {"ce": ce, "bce": bce, "dice": dice})


def stage3_total(grpo, bce, dice) -> LossReport:
    return LossReport(grpo + bce + dice, {"grpo": grpo, "bce": bce, "dice": dice})
