"""Procedural micro referenced audio-visual segmentation task.

Scenes hold 2-4 static objects on a small grid, each with one audio event.
References are drawn from a fixed set of predicate templates and are always
satisfied by exactly one object. Four-step reasoning targets are composed
from scene ground truth, and ``oracle_correct`` plays the expert annotator
that repairs a flawed reasoning path.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import (
    CLASS_BY_NAME, CLASS_INDEX, CLASS_REGISTRY, ClassLabel, Query, ReasoningPath, STEP_MARKERS,
    STEP_NAMES, TERMINAL, TOKEN_ID, class_signature, seen_classes, tokenize,
    SIGNATURE_DIM, detokenize,
)

FORMAT_VERSION = 1
GRID = (24, 24)
N_TIMESTEPS = 16
MAX_OBJECTS = 4
INSTRUCTION = tokenize("segment the referred object")
LOUDNESS_LEVELS = tuple(round(0.2 + 0.1 * k, 1) for k in range(9))

# video channel layout of the pooled per-pixel map
SIG = slice(0, SIGNATURE_DIM)
CH_OBJ = SIGNATURE_DIM
CH_X, CH_Y = SIGNATURE_DIM + 1, SIGNATURE_DIM + 2
CH_CX, CH_CY = SIGNATURE_DIM + 3, SIGNATURE_DIM + 4
CH_AREA = SIGNATURE_DIM + 5
CH_ACT = SIGNATURE_DIM + 6
N_VIDEO_CHANNELS = SIGNATURE_DIM + 7

TEMPLATE_KINDS = (
    "loudest", "quietest", "first", "last", "longer_than", "left_of", "right_of",
    "largest", "direct",
)


class Unreferencable(Exception):
    """No template yields a unique target for this scene."""


@dataclass(frozen=True)
class AudioEvent:
    onset: int
    duration: int
    loudness: float

    @property
    def sounding(self) -> bool:
        return self.loudness > 0


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    class_name: str
    shape: str  # "rectangle" | "disk"
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    audio: AudioEvent

    @property
    def class_label(self) -> ClassLabel:
        return CLASS_BY_NAME[self.class_name]

    def mask(self, grid=GRID) -> np.ndarray:
        m = np.zeros(grid, dtype=bool)
        r0, c0, r1, c1 = self.bbox
        if self.shape == "rectangle":
            m[r0:r1, c0:c1] = True
        else:
            rad = (r1 - r0 - 1) // 2
            cr, cc = r0 + rad, c0 + rad
            rr, cc_ = np.ogrid[: grid[0], : grid[1]]
            m[(rr - cr) ** 2 + (cc_ - cc) ** 2 <= rad * rad] = True
        return m

    @property
    def center(self) -> tuple[float, float]:
        r0, c0, r1, c1 = self.bbox
        return ((r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0)

    @property
    def area(self) -> int:
        return int(self.mask().sum())


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    grid_h: int = GRID[0]
    grid_w: int = GRID[1]
    n_timesteps: int = N_TIMESTEPS

    def __post_init__(self):
        if len(self.objects) < 2:
            raise ValueError("scene needs at least two objects")
        names = [o.class_name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("class labels within a scene must be distinct")

    def by_id(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    def to_dict(self) -> dict:
        return {
            "grid": [self.grid_h, self.grid_w],
            "n_timesteps": self.n_timesteps,
            "objects": [
                {"id": o.object_id, "class": o.class_name, "shape": o.shape, "bbox": list(o.bbox),
                 "onset": o.audio.onset, "duration": o.audio.duration, "loudness": o.audio.loudness}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = tuple(
            SceneObject(o["id"], o["class"], o["shape"], tuple(o["bbox"]),
                        AudioEvent(o["onset"], o["duration"], o["loudness"]))
            for o in d["objects"]
        )
        return cls(objs, d["grid"][0], d["grid"][1], d["n_timesteps"])


# ---------------------------------------------------------------- scenes

def generate_scene(seed: int, class_pool: Sequence[ClassLabel], *, grid=GRID,
                   n_timesteps: int = N_TIMESTEPS, require: Sequence[ClassLabel] = ()) -> Scene:
    pool = sorted({c.name for c in class_pool})
    if len(pool) < 2:
        raise ValueError("class_pool needs at least two labels")
    if n_timesteps < 1:
        raise ValueError("n_timesteps must be >= 1")
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(2, min(MAX_OBJECTS, len(pool)) + 1))
    required = sorted({c.name for c in require})
    rest = [c for c in pool if c not in required]
    names = required + list(rng.choice(rest, size=n_obj - len(required), replace=False))
    names = [names[i] for i in rng.permutation(len(names))]

    H, W = grid
    objects: list[SceneObject] = []
    taken = np.zeros(grid, dtype=bool)
    retries = 0
    for oid, name in enumerate(names):
        while True:
            if retries >= 1000:
                raise RuntimeError(f"could not place {n_obj} objects after 1000 retries (seed {seed})")
            if rng.random() < 0.5:
                shape = "rectangle"
                h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            else:
                shape = "disk"
                h = w = 2 * int(rng.integers(2, 5)) + 1
            r0, c0 = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
            # one-pixel gap keeps boundaries separate
            if taken[max(r0 - 1, 0):r0 + h + 1, max(c0 - 1, 0):c0 + w + 1].any():
                retries += 1
                continue
            break
        taken[r0:r0 + h, c0:c0 + w] = True
        if rng.random() < 0.2:
            ev = AudioEvent(0, 0, 0.0)
        else:
            dur = int(rng.integers(4, min(10, n_timesteps) + 1)) if n_timesteps >= 4 else n_timesteps
            onset = int(rng.integers(0, n_timesteps - dur + 1))
            ev = AudioEvent(onset, dur, float(LOUDNESS_LEVELS[int(rng.integers(len(LOUDNESS_LEVELS)))]))
        objects.append(SceneObject(oid, name, shape, (r0, c0, r0 + h, c0 + w), ev))
    return Scene(tuple(objects), H, W, n_timesteps)


def envelope(n_timesteps: int, onset: int, duration: int) -> np.ndarray:
    """Raised-cosine bump sampled at step midpoints over [onset, onset + duration)."""
    env = np.zeros(n_timesteps)
    if duration <= 0:
        return env
    t = np.arange(n_timesteps)
    inside = (t >= onset) & (t < onset + duration)
    phase = (t[inside] - onset + 0.5) / duration
    env[inside] = 0.5 * (1.0 - np.cos(2.0 * math.pi * phase))
    return env


def envelope_peak(duration: int) -> float:
    if duration <= 0:
        return 0.0
    return float(envelope(duration, 0, duration).max())


def render_features(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Full video (T, H, W, C_v) and audio (T, n_classes) tensors."""
    T, H, W = scene.n_timesteps, scene.grid_h, scene.grid_w
    static = np.zeros((H, W, N_VIDEO_CHANNELS))
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    static[..., CH_X] = (xs + 0.5) / W * 2 - 1
    static[..., CH_Y] = (ys + 0.5) / H * 2 - 1
    video = np.repeat(static[None], T, axis=0)
    audio = np.zeros((T, len(CLASS_REGISTRY)))
    for o in scene.objects:
        m = o.mask((H, W))
        cy, cx = o.center
        video[:, m, SIG] = class_signature(o.class_name)
        video[:, m, CH_OBJ] = 1.0
        video[:, m, CH_CX] = (cx + 0.5) / W * 2 - 1
        video[:, m, CH_CY] = (cy + 0.5) / H * 2 - 1
        video[:, m, CH_AREA] = m.sum() / 64.0
        energy = o.audio.loudness * envelope(T, o.audio.onset, o.audio.duration)
        video[:, m, CH_ACT] = energy[:, None]
        audio[:, CLASS_INDEX[o.class_name]] += energy
    return np.round(video, 4), np.round(audio, 4)


def pooled_video(video: np.ndarray) -> np.ndarray:
    return np.round(video.mean(axis=0), 4)


# ---------------------------------------------------------------- references

@dataclass(frozen=True)
class Reference:
    kind: str
    anchor: Optional[str]  # class name of the anchor object X, if any
    tokens: tuple[int, ...]

    @property
    def text(self) -> str:
        return detokenize(self.tokens)


_REF_TEXT = {
    "loudest": "the loudest object",
    "quietest": "the quietest object",
    "first": "the first object to make a sound",
    "last": "the last object to make a sound",
    "longer_than": "the object that sounds longer than the {x}",
    "left_of": "the object left of the {x}",
    "right_of": "the object right of the {x}",
    "largest": "the largest object",
    "direct": "the {x}",
}


def _unique(objs, key, pick) -> Optional[SceneObject]:
    if not objs:
        return None
    vals = [key(o) for o in objs]
    best = pick(vals)
    hits = [o for o, v in zip(objs, vals) if v == best]
    return hits[0] if len(hits) == 1 else None


def reference_satisfiers(scene: Scene, kind: str, anchor: Optional[str] = None) -> list[SceneObject]:
    """Every object satisfying the predicate; used directly as the brute-force check."""
    objs = list(scene.objects)
    sounding = [o for o in objs if o.audio.sounding]
    if kind in ("loudest", "quietest", "first", "last"):
        if len(sounding) < 2:
            return []
        key = {"loudest": lambda o: -o.audio.loudness, "quietest": lambda o: o.audio.loudness,
               "first": lambda o: o.audio.onset, "last": lambda o: -o.audio.onset}[kind]
        best = min(key(o) for o in sounding)
        return [o for o in sounding if key(o) == best]
    if kind == "largest":
        best = max(o.area for o in objs)
        return [o for o in objs if o.area == best]
    if kind == "direct":
        return [o for o in objs if o.class_name == anchor]
    x = [o for o in objs if o.class_name == anchor]
    if len(x) != 1:
        return []
    x = x[0]
    others = [o for o in objs if o is not x]
    if kind == "longer_than":
        if not x.audio.sounding:
            return []
        return [o for o in others if o.audio.duration > x.audio.duration]
    if kind in ("left_of", "right_of"):
        xs = [o.center[1] for o in objs]
        if len(set(xs)) != len(xs):
            return []
        if kind == "left_of":
            return [o for o in others if o.center[1] < x.center[1]]
        return [o for o in others if o.center[1] > x.center[1]]
    raise ValueError(kind)


def candidate_references(scene: Scene) -> list[tuple[str, Optional[str], int]]:
    """All (kind, anchor, target_id) with a unique satisfier."""
    out = []
    names = sorted(o.class_name for o in scene.objects)
    for kind in TEMPLATE_KINDS:
        anchors = names if kind in ("longer_than", "left_of", "right_of", "direct") else [None]
        for a in anchors:
            sat = reference_satisfiers(scene, kind, a)
            if len(sat) == 1:
                out.append((kind, a, sat[0].object_id))
    return out


def make_reference(kind: str, anchor: Optional[str]) -> Reference:
    return Reference(kind, anchor, tokenize(_REF_TEXT[kind].format(x=anchor)))


def sample_reference(scene: Scene, seed: int, *, kinds: Sequence[str] = TEMPLATE_KINDS,
                     target_filter: Optional[Callable[[SceneObject], bool]] = None
                     ) -> tuple[Reference, int]:
    cands = [c for c in candidate_references(scene) if c[0] in kinds]
    if target_filter is not None:
        cands = [c for c in cands if target_filter(scene.by_id(c[2]))]
    if not cands:
        raise Unreferencable("no template yields a unique target")
    rng = np.random.default_rng(seed)
    # pick the template kind first so direct references do not dominate
    kinds_avail = sorted({c[0] for c in cands}, key=TEMPLATE_KINDS.index)
    kind = kinds_avail[int(rng.integers(len(kinds_avail)))]
    sub = [c for c in cands if c[0] == kind]
    kind, anchor, target = sub[int(rng.integers(len(sub)))]
    return make_reference(kind, anchor), target


# ---------------------------------------------------------------- reasoning targets

def _names(objs) -> str:
    return " , ".join(o.class_name for o in objs)


def _step_texts(scene: Scene, ref: Reference, target: SceneObject) -> dict[str, str]:
    left_to_right = sorted(scene.objects, key=lambda o: (o.center[1], o.center[0]))
    sounding = sorted((o for o in scene.objects if o.audio.sounding),
                      key=lambda o: (-o.audio.loudness, o.audio.onset, o.class_name))
    silent = [o for o in left_to_right if not o.audio.sounding]
    audio = "audio :"
    if sounding:
        audio += " " + _names(sounding)
    if silent:
        audio += (" ;" if sounding else "") + " " + _names(silent) + " silent"
    t, x = target.class_name, ref.anchor
    reason = {
        "loudest": f"the loudest is {t}",
        "quietest": f"the quietest is {t}",
        "first": f"the first to sound is {t}",
        "last": f"the last to sound is {t}",
        "longer_than": f"only {t} sounds longer than {x}",
        "left_of": f"only {t} is left of {x}",
        "right_of": f"only {t} is right of {x}",
        "largest": f"the largest is {t}",
        "direct": f"it names {t}",
    }[ref.kind]
    return {
        "video": f"video : {_names(left_to_right)} .",
        "audio": audio + " .",
        "reference": f"reference : {reason} .",
        "answer": f"answer : the target is {t} .",
    }


def compose_cot_target(scene: Scene, ref: Reference, target_object: int) -> ReasoningPath:
    texts = _step_texts(scene, ref, scene.by_id(target_object))
    toks: list[int] = []
    spans = {}
    for name in STEP_NAMES:
        seg = tokenize(texts[name])
        spans[name] = (len(toks), len(toks) + len(seg))
        toks.extend(seg)
    term = (len(toks), len(toks) + 3)
    toks.extend(TERMINAL)
    return ReasoningPath(tuple(toks), spans, term)


def find_step_spans(tokens: Sequence[int]) -> Optional[dict[str, tuple[int, int]]]:
    """Locate the four steps by their markers; None unless each appears once, in order.

    The answer span runs through the first ``.`` after its marker.
    """
    toks = list(tokens)
    pos = {}
    for name, mid in STEP_MARKERS.items():
        idx = [i for i, t in enumerate(toks) if t == mid and i + 1 < len(toks) and toks[i + 1] == TOKEN_ID[":"]]
        if len(idx) != 1:
            return None
        pos[name] = idx[0]
    order = [pos[n] for n in STEP_NAMES]
    if order != sorted(order):
        return None
    spans = {}
    for k, name in enumerate(STEP_NAMES[:-1]):
        spans[name] = (pos[name], pos[STEP_NAMES[k + 1]])
    a = pos["answer"]
    dot = next((i for i in range(a, len(toks)) if toks[i] == TOKEN_ID["."]), len(toks) - 1)
    spans["answer"] = (a, dot + 1)
    return spans


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class Sample:
    sample_id: str
    seed: int
    scene: Scene
    query: Query
    reference: Reference
    target_object: int
    gt_mask: np.ndarray
    gt_class: ClassLabel
    cot_target: ReasoningPath
    split: str = ""


def make_sample(seed: int, class_pool: Sequence[ClassLabel], *, sample_id: str = "", split: str = "",
                unseen_target: bool = False) -> Sample:
    """Deterministic sample from ``seed``; resamples scenes that admit no valid reference."""
    ss = np.random.SeedSequence(seed)
    for attempt, child in enumerate(ss.spawn(64)):
        scene_seed, ref_seed = (int(s) for s in child.generate_state(2))
        require = ()
        if unseen_target:
            pool_unseen = [c for c in class_pool if c.split_tag == "unseen"]
            pick = np.random.default_rng(scene_seed + 1).integers(len(pool_unseen))
            require = (pool_unseen[int(pick)],)
        scene = generate_scene(scene_seed, class_pool, require=require)
        filt = (lambda o: o.class_label.split_tag == "unseen") if unseen_target else None
        try:
            ref, target = sample_reference(scene, ref_seed, target_filter=filt)
        except Unreferencable:
            continue
        return build_sample(scene, ref, target, seed=seed, sample_id=sample_id, split=split)
    raise RuntimeError(f"seed {seed}: no referencable scene in 64 attempts")


def build_sample(scene: Scene, ref: Reference, target: int, *, seed: int = 0, sample_id: str = "",
                 split: str = "") -> Sample:
    video, audio = render_features(scene)
    obj = scene.by_id(target)
    query = Query(INSTRUCTION, ref.tokens, pooled_video(video), audio)
    return Sample(sample_id, seed, scene, query, ref, target, obj.mask((scene.grid_h, scene.grid_w)),
                  obj.class_label, compose_cot_target(scene, ref, target), split)


# ---------------------------------------------------------------- oracle annotator

def oracle_correct(sample: Sample, wrong_path: ReasoningPath | Sequence[int]) -> ReasoningPath:
    """Span-level minimal repair of a decoded path against scene ground truth."""
    toks = tuple(wrong_path.tokens if isinstance(wrong_path, ReasoningPath) else wrong_path)
    gt = sample.cot_target
    spans = find_step_spans(toks)
    if spans is None:
        return gt
    out: list[int] = list(toks[: spans["video"][0]])
    new_spans = {}
    for name in STEP_NAMES:
        a, b = spans[name]
        piece = toks[a:b]
        if piece != gt.span_tokens(name):
            piece = gt.span_tokens(name)
        new_spans[name] = (len(out), len(out) + len(piece))
        out.extend(piece)
    tail = toks[spans["answer"][1]:]
    if tail != TERMINAL:
        tail = TERMINAL
    term = (len(out), len(out) + 3)
    out.extend(tail)
    return ReasoningPath(tuple(out), new_spans, term)


class Annotator:
    """Seam for the correction backend; the default uses scene ground truth."""

    def correct(self, sample: Sample, wrong_path: ReasoningPath) -> ReasoningPath:
        return oracle_correct(sample, wrong_path)


# ---------------------------------------------------------------- dataset files

@dataclass
class DatasetConfig:
    seed: int = 0
    n_train: int = 512
    n_val: int = 64
    n_test_seen: int = 128
    n_test_unseen: int = 128

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test_seen": self.n_test_seen,
                "test_unseen": self.n_test_unseen}


SPLITS = ("train", "val", "test_seen", "test_unseen")


def split_seeds(seed: int, split: str, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, SPLITS.index(split)])
    return [int(x) for x in ss.generate_state(n, dtype=np.uint32)]


def generate_split(seed: int, split: str, n: int) -> list[Sample]:
    pool = list(CLASS_REGISTRY) if split == "test_unseen" else seen_classes()
    return [make_sample(s, pool, sample_id=f"{split}-{i:05d}", split=split,
                        unseen_target=(split == "test_unseen"))
            for i, s in enumerate(split_seeds(seed, split, n))]


def encode_rle(mask: np.ndarray) -> str:
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    runs = []
    start = 0
    for i in range(1, len(flat) + 1):
        if i == len(flat) or flat[i] != flat[start]:
            runs.append(f"{flat[start]}:{i - start}")
            start = i
    return ",".join(runs)


def decode_rle(rle: str, shape) -> np.ndarray:
    vals = []
    for run in rle.split(","):
        bit, n = run.split(":")
        vals.extend([int(bit)] * int(n))
    return np.array(vals, dtype=bool).reshape(shape)


def sample_to_record(s: Sample) -> dict:
    return {
        "id": s.sample_id,
        "seed": s.seed,
        "split": s.split,
        "reference": s.reference.text,
        "reference_kind": s.reference.kind,
        "reference_anchor": s.reference.anchor,
        "target_object": s.target_object,
        "target_class": s.gt_class.name,
        "gt_mask_rle": encode_rle(s.gt_mask),
        "video_shape": list(s.query.video.shape),
        "video": s.query.video.ravel().tolist(),
        "audio_shape": list(s.query.audio.shape),
        "audio": s.query.audio.ravel().tolist(),
        "cot_ids": list(s.cot_target.tokens),
        "scene": s.scene.to_dict(),
    }


def sample_from_record(r: dict) -> Sample:
    scene = Scene.from_dict(r["scene"])
    ref = make_reference(r["reference_kind"], r["reference_anchor"])
    cot = compose_cot_target(scene, ref, r["target_object"])
    if list(cot.tokens) != r["cot_ids"]:
        raise ValueError(f"record {r['id']}: stored cot ids disagree with regenerated target")
    video = np.array(r["video"], dtype=np.float64).reshape(r["video_shape"])
    audio = np.array(r["audio"], dtype=np.float64).reshape(r["audio_shape"])
    query = Query(INSTRUCTION, ref.tokens, video, audio)
    gt = decode_rle(r["gt_mask_rle"], (scene.grid_h, scene.grid_w))
    return Sample(r["id"], r["seed"], scene, query, ref, r["target_object"], gt,
                  CLASS_BY_NAME[r["target_class"]], cot, r["split"])


def write_jsonl(path: Path, records) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "w") as f:
            for r in records:
                f.write(json.dumps(r, separators=(",", ":")) + "\n")
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"{path}: {e}") from e


def build_dataset(config: DatasetConfig, out_dir) -> dict:
    """Write manifest.json plus one <split>.jsonl per split; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"{out}: {e}") from e
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": list(GRID),
        "n_timesteps": N_TIMESTEPS,
        "classes": [{"name": c.name, "split": c.split_tag} for c in CLASS_REGISTRY],
        "seed": config.seed,
        "splits": {},
    }
    for split, n in config.counts().items():
        seeds = split_seeds(config.seed, split, n)
        samples = generate_split(config.seed, split, n)
        write_jsonl(out / f"{split}.jsonl", (sample_to_record(s) for s in samples))
        manifest["splits"][split] = {"count": n, "file": f"{split}.jsonl", "seeds": seeds}
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1) + "\n")
    os.replace(tmp, out / "manifest.json")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as e:
        raise FileNotFoundError(f"{path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    return manifest


def load_split(data_dir, split: str) -> list[Sample]:
    manifest = load_manifest(data_dir)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in {data_dir}")
    path = Path(data_dir) / manifest["splits"][split]["file"]
    try:
        with open(path) as f:
            return [sample_from_record(json.loads(line)) for line in f if line.strip()]
    except OSError as e:
        raise OSError(f"{path}: {e}") from e
