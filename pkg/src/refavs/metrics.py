"""Region (J) and contour (F) accuracy, plus split-level evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .domain import check_mask_pair, parse_final_answer


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = check_mask_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.pad(mask.astype(bool), 1)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    H, W = mask.shape
    m = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out |= m[radius + dy:radius + dy + H, radius + dx:radius + dx + W]
    return out


def contour_f(pred: np.ndarray, gt: np.ndarray, radius: int = 1) -> float:
    """Boundary F1 with a Chebyshev match tolerance of ``radius`` pixels."""
    p, g = check_mask_pair(pred, gt)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    bp, bg = boundary(p), boundary(g)
    precision = (bp & _dilate(bg, radius)).sum() / bp.sum()
    recall = (bg & _dilate(bp, radius)).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class SampleRow:
    id: str
    iou: float
    f: float
    answered: Optional[str]
    correct: bool


@dataclass
class SplitScores:
    J: float
    F: float

    @property
    def JF(self) -> float:
        return (self.J + self.F) / 2


@dataclass
class MetricsReport:
    splits: dict = field(default_factory=dict)  # name -> SplitScores
    rows: dict = field(default_factory=dict)  # name -> list[SampleRow]

    def add_split(self, name: str, rows: Sequence[SampleRow]) -> SplitScores:
        rows = list(rows)
        scores = SplitScores(100.0 * float(np.mean([r.iou for r in rows])),
                             100.0 * float(np.mean([r.f for r in rows])))
        self.splits[name] = scores
        self.rows[name] = rows
        return scores

    def add_mix(self, seen: str = "test_seen", unseen: str = "test_unseen", name: str = "mix") -> SplitScores:
        s, u = self.splits[seen], self.splits[unseen]
        self.splits[name] = SplitScores((s.J + u.J) / 2, (s.F + u.F) / 2)
        return self.splits[name]

    def table(self) -> str:
        lines = [f"{'split':<12} {'J':>7} {'F':>7} {'J&F':>7} {'acc':>7}"]
        for name, sc in self.splits.items():
            rows = self.rows.get(name)
            acc = f"{100 * np.mean([r.correct for r in rows]):7.1f}" if rows else f"{'-':>7}"
            lines.append(f"{name:<12} {sc.J:7.2f} {sc.F:7.2f} {sc.JF:7.2f} {acc}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics_splits.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["split", "J", "F", "JF"])
            for name, sc in self.splits.items():
                w.writerow([name, repr(sc.J), repr(sc.F), repr(sc.JF)])
        with open(out / "metrics_samples.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["split", "id", "iou", "f", "answered", "correct"])
            for name, rows in self.rows.items():
                for r in rows:
                    w.writerow([name, r.id, repr(r.iou), repr(r.f), r.answered or "", int(r.correct)])
        (out / "metrics.txt").write_text(self.table() + "\n")


def predict_masks(policy, qb, decodes) -> list[Optional[np.ndarray]]:
    """Threshold-0 masks from the [SEG] embeddings of decode results (None without [SEG])."""
    idx = [i for i, d in enumerate(decodes) if d.stop_reason == "seg_emitted"]
    masks: list[Optional[np.ndarray]] = [None] * len(decodes)
    if idx:
        seg = torch.tensor(np.stack([decodes[i].seg_embedding for i in idx]), dtype=policy.dtype)
        with torch.no_grad():
            logits = policy.mask_decode(seg, qb.index(idx))
        for k, i in enumerate(idx):
            masks[i] = (logits[k] > 0).numpy()
    return masks


def evaluate_samples(policy, samples, qb=None, batch_size: int = 64, max_len: Optional[int] = None):
    """Greedy decode every sample; returns per-sample rows and the decode results."""
    from .model import stack_queries

    if qb is None:
        qb = stack_queries([s.query for s in samples])
    rows, decodes = [], []
    for start in range(0, len(samples), batch_size):
        sub = qb.index(list(range(start, min(start + batch_size, len(samples)))))
        dec = policy.decode_batch(sub, "greedy", max_len=max_len)
        masks = predict_masks(policy, sub, dec)
        for k, (d, m) in enumerate(zip(dec, masks)):
            s = samples[start + k]
            if m is None:
                iou = f = 0.0
            else:
                iou, f = jaccard(m, s.gt_mask), contour_f(m, s.gt_mask)
            ans = parse_final_answer(d.tokens)
            rows.append(SampleRow(s.sample_id, iou, f, ans, ans == s.gt_class.name))
        decodes.extend(dec)
    return rows, decodes


def evaluate_split(policy, samples, name: str = "split", report: Optional[MetricsReport] = None,
                   **kw) -> MetricsReport:
    report = report if report is not None else MetricsReport()
    rows, _ = evaluate_samples(policy, samples, **kw)
    report.add_split(name, rows)
    return report
