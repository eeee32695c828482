"""Shared vocabulary, class registry and reasoning-path helpers."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

SEEN_CLASSES = (
    "violin", "cello", "guitar", "piano", "drum",
    "trumpet", "flute", "dog", "man", "woman",
)
UNSEEN_CLASSES = ("saxophone", "cat", "car", "bird")

SIGNATURE_DIM = 8


@dataclass(frozen=True)
class ClassLabel:
    name: str
    split_tag: str  # "seen" | "unseen"

    def __post_init__(self):
        if not self.name or self.name != self.name.lower():
            raise ValueError(f"bad class name {self.name!r}")
        if self.split_tag not in ("seen", "unseen"):
            raise ValueError(f"bad split tag {self.split_tag!r}")


CLASS_REGISTRY: tuple[ClassLabel, ...] = tuple(
    [ClassLabel(n, "seen") for n in SEEN_CLASSES]
    + [ClassLabel(n, "unseen") for n in UNSEEN_CLASSES]
)
CLASS_BY_NAME = {c.name: c for c in CLASS_REGISTRY}
CLASS_INDEX = {c.name: i for i, c in enumerate(CLASS_REGISTRY)}


def seen_classes() -> list[ClassLabel]:
    return [c for c in CLASS_REGISTRY if c.split_tag == "seen"]


def unseen_classes() -> list[ClassLabel]:
    return [c for c in CLASS_REGISTRY if c.split_tag == "unseen"]


def _make_signatures(n: int, dim: int, min_hamming: int = 3, seed: int = 1234) -> np.ndarray:
    rng = np.random.default_rng(seed)
    codes: list[np.ndarray] = []
    while len(codes) < n:
        c = rng.integers(0, 2, size=dim)
        if all(np.sum(c != o) >= min_hamming for o in codes):
            codes.append(c)
    return np.stack(codes).astype(np.float64) * 2.0 - 1.0


# fixed +-1 code per registered class; shared by the visual, audio and text sides
CLASS_SIGNATURES = _make_signatures(len(CLASS_REGISTRY), SIGNATURE_DIM)


def class_signature(name: str) -> np.ndarray:
    return CLASS_SIGNATURES[CLASS_INDEX[name]]


# ---------------------------------------------------------------- vocabulary

PAD, BOS, EOS, SEG = "[PAD]", "[BOS]", "[EOS]", "[SEG]"

_WORDS = (
    "It", "is", "the", "target", "object", "loudest", "quietest", "first", "last",
    "to", "make", "a", "sound", "sounds", "that", "longer", "than", "left", "right",
    "of", "largest", "only", "names", "it", "silent", "segment", "referred",
    "video", "audio", "reference", "answer",
    "Wait", "let", "me", "re-evaluate", "Hmm", "check", "again", "Actually", "I",
    "made", "mistake", "On", "second", "thought", "recheck", "not",
    "fiddle",  # synonym distractor; deliberately not a class
    ":", ",", ".", ";",
)

VOCAB: tuple[str, ...] = (PAD, BOS, EOS, SEG) + tuple(c.name for c in CLASS_REGISTRY) + _WORDS
assert len(set(VOCAB)) == len(VOCAB)
TOKEN_ID = {s: i for i, s in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)

PAD_ID, BOS_ID, EOS_ID, SEG_ID = (TOKEN_ID[s] for s in (PAD, BOS, EOS, SEG))
CLASS_TOKEN_IDS = {c.name: TOKEN_ID[c.name] for c in CLASS_REGISTRY}
_CLASS_OF_TOKEN = {v: k for k, v in CLASS_TOKEN_IDS.items()}

TERMINAL = (TOKEN_ID["It"], TOKEN_ID["is"], SEG_ID)
ANSWER_PHRASE = (TOKEN_ID["the"], TOKEN_ID["target"], TOKEN_ID["is"])
STEP_NAMES = ("video", "audio", "reference", "answer")
STEP_MARKERS = {name: TOKEN_ID[name] for name in STEP_NAMES}

_PUNCT = {":", ",", ".", ";"}
_SPLIT_RE = re.compile(r"\[[A-Z]+\]|[^\s:,.;\[]+|[:,.;]")


@dataclass(frozen=True)
class Token:
    id: int
    surface: str

    @classmethod
    def of(cls, surface: str) -> "Token":
        return cls(TOKEN_ID[surface], surface)


def token_id(word: str) -> int:
    if word in TOKEN_ID:
        return TOKEN_ID[word]
    low = word.lower()
    if low in TOKEN_ID:
        return TOKEN_ID[low]
    raise KeyError(f"out-of-vocabulary word {word!r}")


def tokenize(text: str) -> tuple[int, ...]:
    return tuple(token_id(w) for w in _SPLIT_RE.findall(text))


def detokenize(ids: Iterable[int]) -> str:
    out: list[str] = []
    for i in ids:
        s = VOCAB[i]
        if out and s not in _PUNCT:
            out.append(" ")
        out.append(s)
    return "".join(out)


# ---------------------------------------------------------------- paths

@dataclass(frozen=True)
class ReasoningPath:
    """Token ids plus optional labelled spans ``name -> (start, stop)``."""

    tokens: tuple[int, ...]
    step_spans: dict = field(default_factory=dict, compare=False)
    terminal_span: Optional[tuple[int, int]] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        prev = 0
        for name in STEP_NAMES:
            if name in self.step_spans:
                a, b = self.step_spans[name]
                if a < prev or b < a or b > len(self.tokens):
                    raise ValueError(f"step span {name} out of order: {(a, b)}")
                prev = b

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return detokenize(self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "ReasoningPath":
        return cls(tokenize(text))

    def span_tokens(self, name: str) -> tuple[int, ...]:
        a, b = self.step_spans[name]
        return self.tokens[a:b]


@dataclass(frozen=True)
class Query:
    """Conditioning for one sample.

    ``video`` is the time-pooled per-pixel map (H, W, C_v); ``audio`` is the
    per-class band energy (T, n_classes).
    """

    instruction: tuple[int, ...]
    reference: tuple[int, ...]
    video: np.ndarray
    audio: np.ndarray

    def __post_init__(self):
        if not self.reference:
            raise ValueError("reference must be non-empty")
        if not self.instruction:
            raise ValueError("instruction must be non-empty")


def ends_with_seg(path: ReasoningPath | Sequence[int]) -> bool:
    toks = path.tokens if isinstance(path, ReasoningPath) else tuple(path)
    return len(toks) >= 3 and tuple(toks[-3:]) == TERMINAL


def parse_final_answer(path: ReasoningPath | Sequence[int]) -> Optional[str]:
    """Class name following the last ``the target is``; None if absent or unregistered."""
    toks = path.tokens if isinstance(path, ReasoningPath) else tuple(path)
    for i in range(len(toks) - 3, -1, -1):
        if tuple(toks[i:i + 3]) == ANSWER_PHRASE:
            if i + 3 < len(toks):
                return _CLASS_OF_TOKEN.get(toks[i + 3])
            return None
    return None


def check_mask_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)
