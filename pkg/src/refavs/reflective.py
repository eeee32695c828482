"""Stage-2 corpus: hard-sample selection and reflective path assembly."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import SEG_ID, ReasoningPath, ends_with_seg, parse_final_answer, tokenize
from .synthgen import Annotator, Sample, sample_from_record, sample_to_record

log = logging.getLogger(__name__)

HARD_IOU_THRESHOLD = 0.6
# 1,505 reflective : 3,500 standard
STANDARD_PER_REFLECTIVE = 3500 / 1505
CORPUS_VERSION = 1

TRIGGER_PHRASES: tuple[tuple[int, ...], ...] = tuple(tokenize(t) for t in (
    "Wait, let me re-evaluate.",
    "Hmm, let me check again.",
    "Actually, I made a mistake.",
    "On second thought, let me recheck.",
    "Wait, that is not right.",
))


def sample_trigger(rng: np.random.Generator) -> int:
    return int(rng.integers(len(TRIGGER_PHRASES)))


@dataclass(frozen=True)
class EvalResult:
    sample_id: str
    iou: float
    answered: Optional[str]
    gt_class: str


def select_hard_samples(results: Iterable[EvalResult]) -> set[str]:
    """IoU below 0.6 and a final answer that differs from the ground-truth class."""
    return {r.sample_id for r in results if r.iou < HARD_IOU_THRESHOLD and r.answered != r.gt_class}


def strip_terminal(tokens: Sequence[int]) -> tuple[int, ...]:
    toks = tuple(tokens)
    if ends_with_seg(toks):
        return toks[:-3]
    if toks and toks[-1] == SEG_ID:
        return toks[:-1]
    return toks


def build_reflective_path(y_wrong, trigger: Sequence[int], y_correct) -> ReasoningPath:
    wrong = y_wrong.tokens if isinstance(y_wrong, ReasoningPath) else tuple(y_wrong)
    correct = y_correct.tokens if isinstance(y_correct, ReasoningPath) else tuple(y_correct)
    if not correct or correct[-1] != SEG_ID:
        raise ValueError("y_correct must end with [SEG]")
    toks = strip_terminal(wrong) + tuple(trigger) + correct
    return ReasoningPath(toks, terminal_span=(len(toks) - 3, len(toks)) if ends_with_seg(toks) else None)


@dataclass(frozen=True)
class ReflectiveRecord:
    sample_id: str
    y_wrong: ReasoningPath
    trigger_id: int
    y_correct: ReasoningPath
    y_reflective: ReasoningPath

    @property
    def wrong_span(self) -> tuple[int, int]:
        return (0, len(strip_terminal(self.y_wrong.tokens)))

    @property
    def correct_span(self) -> tuple[int, int]:
        n = len(self.y_reflective)
        return (n - len(self.y_correct), n)


def make_record(sample: Sample, y_wrong: ReasoningPath, trigger_id: int,
                annotator: Optional[Annotator] = None) -> ReflectiveRecord:
    annotator = annotator or Annotator()
    y_correct = annotator.correct(sample, y_wrong)
    y_ref = build_reflective_path(y_wrong, TRIGGER_PHRASES[trigger_id], y_correct)
    return ReflectiveRecord(sample.sample_id, y_wrong, trigger_id, y_correct, y_ref)


def check_record(rec: ReflectiveRecord, gt_class: str) -> bool:
    expect = strip_terminal(rec.y_wrong.tokens) + TRIGGER_PHRASES[rec.trigger_id] + rec.y_correct.tokens
    return (rec.y_reflective.tokens == expect and ends_with_seg(rec.y_reflective)
            and parse_final_answer(rec.y_reflective) == gt_class)


@dataclass(frozen=True)
class CorpusEntry:
    sample: Sample
    target: tuple[int, ...]
    is_reflective: bool
    trigger_id: Optional[int] = None
    wrong_span: Optional[tuple[int, int]] = None
    correct_span: Optional[tuple[int, int]] = None


def build_stage2_corpus(records: Sequence[ReflectiveRecord], samples_by_id: dict, standard: Sequence[Sample],
                        seed: int, min_standard: int = 0) -> list[CorpusEntry]:
    """All reflective records plus standard samples at the 1,505 : 3,500 ratio, shuffled by seed.

    ``min_standard`` floors the standard share so a handful of hard samples cannot shrink the
    corpus to a few entries that the stage-2 run would then overfit.
    """
    if not standard:
        raise ValueError("standard pool must be non-empty")
    rng = np.random.default_rng(seed)
    if records:
        n_std = min(len(standard), max(int(round(len(records) * STANDARD_PER_REFLECTIVE)), min_standard))
    else:
        log.warning("no hard samples; stage-2 corpus holds standard samples only")
        n_std = len(standard)
    pick = sorted(rng.choice(len(standard), size=n_std, replace=False).tolist())
    entries = [CorpusEntry(samples_by_id[r.sample_id], r.y_reflective.tokens, True, r.trigger_id,
                           r.wrong_span, r.correct_span) for r in records]
    entries += [CorpusEntry(standard[i], standard[i].cot_target.tokens, False) for i in pick]
    order = rng.permutation(len(entries))
    return [entries[i] for i in order]


def write_corpus(entries: Sequence[CorpusEntry], out_dir, provenance: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in entries:
        rec = sample_to_record(e.sample)
        rec.update({
            "is_reflective": e.is_reflective,
            "trigger_id": e.trigger_id,
            "wrong_span": list(e.wrong_span) if e.wrong_span else None,
            "correct_span": list(e.correct_span) if e.correct_span else None,
            "target_ids": list(e.target),
        })
        lines.append(json.dumps(rec, separators=(",", ":")) + "\n")
    tmp = out / "corpus.jsonl.tmp"
    tmp.write_text("".join(lines))
    os.replace(tmp, out / "corpus.jsonl")
    manifest = {
        "format_version": CORPUS_VERSION,
        "n_entries": len(entries),
        "n_reflective": sum(e.is_reflective for e in entries),
        "provenance": provenance,
        "entries": [{"id": e.sample.sample_id, "is_reflective": e.is_reflective} for e in entries],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return out


def load_corpus(corpus_dir) -> tuple[list[CorpusEntry], dict]:
    path = Path(corpus_dir)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        lines = (path / "corpus.jsonl").read_text().splitlines()
    except OSError as e:
        raise FileNotFoundError(f"{path}: {e}") from e
    if manifest.get("format_version") != CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported corpus version")
    entries = []
    for line in lines:
        r = json.loads(line)
        entries.append(CorpusEntry(
            sample_from_record(r), tuple(r["target_ids"]), r["is_reflective"], r["trigger_id"],
            tuple(r["wrong_span"]) if r["wrong_span"] else None,
            tuple(r["correct_span"]) if r["correct_span"] else None))
    return entries, manifest
