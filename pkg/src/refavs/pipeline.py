"""Stage orchestration: teacher, SFT, reflective corpus + training, GRPO, eval, report."""
from __future__ import annotations

import configparser
import io
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .domain import TERMINAL
from .grpo import TELEMETRY_COLUMNS, GrpoConfig, grpo_step, mean_group_reward
from .losses import bce_loss, dice_loss, distill_loss, sft_loss, stage1_total, stage2_total
from .metrics import MetricsReport, evaluate_samples
from .model import Dims, Policy, init_params, load_checkpoint, save_checkpoint, stack_queries
from .reflective import (
    EvalResult, build_stage2_corpus, check_record, load_corpus, make_record, sample_trigger,
    select_hard_samples, write_corpus,
)
from .synthgen import DatasetConfig, Sample, build_dataset, load_split

log = logging.getLogger(__name__)

STAGES = ("teacher", "sft", "reflective", "grpo")
DEFAULT_STEPS = {"teacher": 1440, "sft": 720, "reflective": 300, "grpo": 500}
# GRPO runs at a lower rate: at 1e-3 the converged policy drifts and the reward collapses mid-run.
DEFAULT_LR = {"teacher": 1e-3, "sft": 1e-3, "reflective": 1e-3, "grpo": 3e-4}
STAGE_COLUMNS = {
    "teacher": ("step", "loss_total", "ce", "bce", "dice"),
    "sft": ("step", "loss_total", "ce", "bce", "dice", "dis"),
    "reflective": ("step", "loss_total", "ce", "bce", "dice"),
    "grpo": TELEMETRY_COLUMNS,
}


class UsageError(Exception):
    """Bad input or configuration (exit code 2)."""


@dataclass
class RunConfig:
    stage: str = "sft"
    data: str = "data"
    checkpoint_in: Optional[str] = None
    teacher: Optional[str] = None
    corpus: Optional[str] = None
    steps: Optional[int] = None
    batch_size: int = 2
    grad_accum: int = 4
    lr: Optional[float] = None
    grad_clip: float = 1.0
    seed: int = 0
    out: str = "runs/out"
    distill: bool = True
    save_every: int = 100
    holdout_split: str = "val"
    min_standard: int = 256
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    dims: Dims = field(default_factory=Dims)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise UsageError(f"unknown stage {self.stage!r}")
        if self.steps is None:
            self.steps = DEFAULT_STEPS[self.stage]
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.steps <= 0:
            raise UsageError("steps must be positive")
        if self.batch_size <= 0 or self.grad_accum <= 0:
            raise UsageError("batch_size and grad_accum must be positive")

    def to_ini(self) -> str:
        cp = _parser()
        run = {k: ("" if v is None else str(v)) for k, v in asdict(self).items() if k not in ("grpo", "dims")}
        cp["run"] = run
        cp["grpo"] = {k: str(v) for k, v in asdict(self.grpo).items()}
        cp["model"] = {k: str(v) for k, v in asdict(self.dims).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _coerce(typ, raw: str):
    if raw == "" or raw.lower() == "none":
        return None
    t = str(typ)
    if "bool" in t:
        return raw.lower() in ("1", "true", "yes", "on")
    if "int" in t:
        return int(raw)
    if "float" in t:
        return float(raw)
    return raw


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    return cp


def read_ini(path) -> configparser.ConfigParser:
    cp = _parser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    return cp


def load_run_config(path=None, **overrides) -> RunConfig:
    kw: dict = {}
    grpo_kw: dict = {}
    dims_kw: dict = {}
    if path is not None:
        cp = read_ini(path)
        types = {f.name: f.type for f in fields(RunConfig)}
        for k, v in cp["run"].items() if cp.has_section("run") else []:
            if k not in types:
                raise UsageError(f"unknown [run] key {k!r}")
            kw[k] = _coerce(types[k], v)
        gtypes = {f.name: f.type for f in fields(GrpoConfig)}
        for k, v in cp["grpo"].items() if cp.has_section("grpo") else []:
            grpo_kw[k] = _coerce(gtypes[k], v)
        dtypes = {f.name: f.type for f in fields(Dims)}
        for k, v in cp["model"].items() if cp.has_section("model") else []:
            dims_kw[k] = _coerce(dtypes[k], v)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if grpo_kw:
        kw["grpo"] = GrpoConfig(**grpo_kw)
    if dims_kw:
        kw["dims"] = Dims(**dims_kw)
    return RunConfig(**kw)


# ---------------------------------------------------------------- run bookkeeping

class CurveWriter:
    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = path
        self.columns = tuple(columns)
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(self.columns)

    def append(self, row: dict) -> None:
        extra = set(row) - set(self.columns)
        if extra:
            raise ValueError(f"unexpected curve columns {sorted(extra)}")
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns])


def read_curves(path) -> dict[str, np.ndarray]:
    with open(path) as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    return out


def _write_record(out: Path, cfg: RunConfig, policy: Policy, checkpoints: list, t0: float,
                  extra: Optional[dict] = None) -> dict:
    _evaluate(policy, cfg.data, out / "metrics")
    rec = {
        "config": cfg.to_ini(),
        "checkpoints": checkpoints,
        "curves": str(out / "curves.csv"),
        "metrics": str(out / "metrics"),
        "wall_clock_s": time.time() - t0,
    }
    rec.update(extra or {})
    (out / "run.json").write_text(json.dumps(rec, indent=1) + "\n")
    return rec


def _load_data(cfg: RunConfig, split: str) -> list[Sample]:
    try:
        return load_split(cfg.data, split)
    except (FileNotFoundError, KeyError) as e:
        raise UsageError(f"dataset {cfg.data}: {e}") from e


def _load_ckpt(path, expect_role: Optional[str] = None) -> tuple[Policy, dict]:
    if path is None:
        raise UsageError("a checkpoint path is required")
    try:
        policy, manifest = load_checkpoint(path)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    if expect_role and policy.role_tag != expect_role:
        raise UsageError(f"{path}: expected role_tag {expect_role!r}, found {policy.role_tag!r}")
    return policy, manifest


class BatchSampler:
    """Deterministic epoch-wise shuffling of sample indices."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.queue: list[int] = []

    def take(self, k: int) -> list[int]:
        while len(self.queue) < k:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        out, self.queue = self.queue[:k], self.queue[k:]
        return out


def _optimizer(policy: Policy, cfg: RunConfig):
    return torch.optim.Adam(policy.trainable_parameters(), lr=cfg.lr)


def _supervised_loop(policy: Policy, cfg: RunConfig, samples: Sequence[Sample], targets: Sequence[Sequence[int]],
                     curves: CurveWriter, stage: str, teacher: Optional[Policy] = None) -> None:
    """ce + bce + dice (+ dis against ``teacher`` for stage 1), with gradient accumulation."""
    qb = stack_queries([s.query for s in samples])
    gts = torch.tensor(np.stack([s.gt_mask for s in samples]), dtype=torch.float32)
    opt = _optimizer(policy, cfg)
    sampler = BatchSampler(len(samples), cfg.seed)
    for step in range(1, cfg.steps + 1):
        opt.zero_grad(set_to_none=True)
        acc: dict[str, float] = {}
        for _ in range(cfg.grad_accum):
            idx = sampler.take(cfg.batch_size)
            sub = qb.index(idx)
            logits, lengths, seg, mask_logits = policy.teacher_forcing_forward(sub, [targets[i] for i in idx])
            tgt = torch.nn.utils.rnn.pad_sequence([torch.tensor(targets[i]) for i in idx], batch_first=True)
            ce = sft_loss(logits, tgt, lengths)
            bce = bce_loss(mask_logits, gts[idx])
            dice = dice_loss(mask_logits, gts[idx])
            if stage == "sft":
                if teacher is not None:
                    with torch.no_grad():
                        _, _, f_t, _ = teacher.teacher_forcing_forward(sub, [TERMINAL] * len(idx))
                    dis = distill_loss(f_t, seg)
                    report = stage1_total(ce, bce, dice, dis)
                else:
                    report = stage2_total(ce, bce, dice)
            else:
                report = stage2_total(ce, bce, dice)
            (report.total / cfg.grad_accum).backward()
            for k, v in report.floats().items():
                acc[k] = acc.get(k, 0.0) + v / cfg.grad_accum
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(policy.trainable_parameters(), cfg.grad_clip)
        opt.step()
        curves.append({"step": step, **acc})


# ---------------------------------------------------------------- commands

def cmd_gen_data(out_dir, config: Optional[DatasetConfig] = None) -> dict:
    config = config or DatasetConfig()
    try:
        manifest = build_dataset(config, out_dir)
    except OSError as e:
        raise UsageError(str(e)) from e
    for split, info in manifest["splits"].items():
        log.info("%s: %d samples -> %s", split, info["count"], info["file"])
    return manifest


def cmd_train_teacher(cfg: RunConfig) -> dict:
    t0 = time.time()
    samples = _load_data(cfg, "train")
    out = _prepare_out(cfg)
    policy = init_params(cfg.seed, cfg.dims, "teacher")
    curves = CurveWriter(out / "curves.csv", STAGE_COLUMNS["teacher"])
    _supervised_loop(policy, cfg, samples, [TERMINAL] * len(samples), curves, "teacher")
    digest = save_checkpoint(policy, out / "checkpoint", {"stage": "teacher", "parent": None,
                                                          "data": str(cfg.data)})
    return _write_record(out, cfg, policy, [str(out / "checkpoint")], t0, {"params_sha256": digest})


def cmd_train_sft(cfg: RunConfig) -> dict:
    t0 = time.time()
    teacher, tman = _load_ckpt(cfg.teacher, expect_role="teacher")
    samples = _load_data(cfg, "train")
    out = _prepare_out(cfg)
    policy = init_params(cfg.seed + 1, cfg.dims, "student")
    policy.mask_decoder.load_state_dict(teacher.mask_decoder.state_dict())
    policy.freeze("mask_decoder")
    teacher.requires_grad_(False)
    cols = STAGE_COLUMNS["sft"] if cfg.distill else STAGE_COLUMNS["reflective"]
    curves = CurveWriter(out / "curves.csv", cols)
    _supervised_loop(policy, cfg, samples, [s.cot_target.tokens for s in samples], curves, "sft",
                     teacher if cfg.distill else None)
    digest = save_checkpoint(policy, out / "checkpoint", {"stage": "sft", "parent": tman["params_sha256"],
                                                          "distill": cfg.distill})
    return _write_record(out, cfg, policy, [str(out / "checkpoint")], t0, {"params_sha256": digest})


def cmd_build_reflective(cfg: RunConfig) -> dict:
    policy, man = _load_ckpt(cfg.checkpoint_in)
    samples = _load_data(cfg, "train")
    out = Path(cfg.out)
    rows, decodes = evaluate_samples(policy, samples)
    results = [EvalResult(r.id, r.iou, r.answered, s.gt_class.name) for r, s in zip(rows, samples)]
    hard = select_hard_samples(results)
    rng = np.random.default_rng(cfg.seed)
    by_id = {s.sample_id: s for s in samples}
    records = []
    too_long = 0
    for s, d in zip(samples, decodes):
        if s.sample_id in hard:
            rec = make_record(s, _as_path(d.tokens), sample_trigger(rng))
            if not check_record(rec, s.gt_class.name):
                raise RuntimeError(f"{s.sample_id}: reflective record violates its invariant")
            # a runaway decode plus trigger and correction can outgrow the decoder
            if len(rec.y_reflective) > policy.dims.max_len:
                too_long += 1
                continue
            records.append(rec)
    if too_long:
        log.warning("dropped %d reflective records longer than max_len %d", too_long, policy.dims.max_len)
    standard = [s for s in samples if s.sample_id not in hard]
    if not standard:
        log.warning("every train sample is hard; drawing standard targets from the whole split")
        standard = list(samples)
    entries = build_stage2_corpus(records, by_id, standard, cfg.seed, cfg.min_standard)
    write_corpus(entries, out, {"stage1_params_sha256": man["params_sha256"], "seed": cfg.seed,
                                "n_hard": len(hard), "n_dropped_too_long": too_long, "data": str(cfg.data)})
    with open(out / "stage1_eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "iou", "answered", "gt_class", "hard"])
        for r in results:
            w.writerow([r.sample_id, repr(r.iou), r.answered or "", r.gt_class, int(r.sample_id in hard)])
    return {"n_hard": len(hard), "n_dropped_too_long": too_long, "n_entries": len(entries), "corpus": str(out)}


def _as_path(tokens):
    from .domain import ReasoningPath
    return ReasoningPath(tuple(tokens))


def cmd_train_reflective(cfg: RunConfig) -> dict:
    t0 = time.time()
    policy, man = _load_ckpt(cfg.checkpoint_in, expect_role="student")
    try:
        entries, cman = load_corpus(cfg.corpus)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    out = _prepare_out(cfg)
    curves = CurveWriter(out / "curves.csv", STAGE_COLUMNS["reflective"])
    _supervised_loop(policy, cfg, [e.sample for e in entries], [e.target for e in entries], curves, "reflective")
    digest = save_checkpoint(policy, out / "checkpoint", {"stage": "reflective", "parent": man["params_sha256"],
                                                          "corpus_n": len(entries)})
    return _write_record(out, cfg, policy, [str(out / "checkpoint")], t0, {"params_sha256": digest})


def cmd_train_grpo(cfg: RunConfig) -> dict:
    t0 = time.time()
    cfg.grpo.validate()
    policy, man = _load_ckpt(cfg.checkpoint_in, expect_role="student")
    samples = _load_data(cfg, "train")
    out = _prepare_out(cfg)
    qb = stack_queries([s.query for s in samples])
    curves = CurveWriter(out / "curves.csv", TELEMETRY_COLUMNS)
    opt = _optimizer(policy, cfg)
    sampler = BatchSampler(len(samples), cfg.seed)
    per_step = cfg.batch_size * cfg.grad_accum
    step_seeds = np.random.SeedSequence([cfg.seed, 3]).generate_state(cfg.steps, dtype=np.uint32)
    ckpts = []
    for step in range(1, cfg.steps + 1):
        idx = sampler.take(per_step)
        row = grpo_step(policy, opt, [samples[i] for i in idx], qb.index(idx), cfg.grpo, step,
                        int(step_seeds[step - 1]), micro_batch=cfg.batch_size, grad_clip=cfg.grad_clip)
        curves.append(row)
        if cfg.save_every and step % cfg.save_every == 0 and step < cfg.steps:
            p = out / "checkpoints" / f"step_{step:05d}"
            save_checkpoint(policy, p, {"stage": "grpo", "parent": man["params_sha256"], "step": step})
            ckpts.append(str(p))
    digest = save_checkpoint(policy, out / "checkpoint", {"stage": "grpo", "parent": man["params_sha256"],
                                                          "step": cfg.steps})
    ckpts.append(str(out / "checkpoint"))
    return _write_record(out, cfg, policy, ckpts, t0, {"params_sha256": digest})


def cmd_eval(checkpoint, data, out_dir, splits: Sequence[str] = ("test_seen", "test_unseen")) -> MetricsReport:
    policy, _ = _load_ckpt(checkpoint)
    return _evaluate(policy, data, out_dir, splits)


def _evaluate(policy: Policy, data, out_dir, splits: Sequence[str] = ("test_seen", "test_unseen")) -> MetricsReport:
    report = MetricsReport()
    for split in splits:
        try:
            samples = load_split(data, split)
        except (FileNotFoundError, KeyError) as e:
            raise UsageError(str(e)) from e
        rows, _ = evaluate_samples(policy, samples)
        report.add_split(split, rows)
    if "test_seen" in report.splits and "test_unseen" in report.splits:
        report.add_mix()
    report.write(out_dir)
    return report


def cmd_holdout_reward(checkpoint, data, split: str = "val", rollouts: int = 16, seed: int = 12345) -> float:
    """Mean total reward of ``rollouts`` sampled responses per held-out query."""
    policy, _ = _load_ckpt(checkpoint)
    return mean_group_reward(policy, load_split(data, split), GrpoConfig(G=rollouts), seed)


def cmd_report(run_dir) -> str:
    from .report import render_report
    path = Path(run_dir) / "curves.csv"
    if not path.exists():
        raise UsageError(f"missing curves file {path}")
    return render_report(path, Path(run_dir))


def run_pipeline(root, seed: int = 0, data_config: Optional[DatasetConfig] = None,
                 steps: Optional[dict] = None) -> dict:
    """Every stage in order under ``root``; returns per-stage paths, timings and headline numbers."""
    root = Path(root)
    steps = steps or {}
    timings = {}
    t = time.time()
    data = root / "data"
    cmd_gen_data(data, data_config or DatasetConfig(seed=seed))
    timings["gen-data"] = time.time() - t

    def run(name, fn, stage, **kw):
        t0 = time.time()
        cfg = RunConfig(stage=stage, data=str(data), seed=seed, out=str(root / name), steps=steps.get(stage), **kw)
        rec = fn(cfg)
        timings[name] = time.time() - t0
        return rec

    run("teacher", cmd_train_teacher, "teacher")
    run("sft", cmd_train_sft, "sft", teacher=str(root / "teacher" / "checkpoint"))
    run("corpus", cmd_build_reflective, "sft", checkpoint_in=str(root / "sft" / "checkpoint"))
    run("reflective", cmd_train_reflective, "reflective", checkpoint_in=str(root / "sft" / "checkpoint"),
        corpus=str(root / "corpus"))
    run("grpo", cmd_train_grpo, "grpo", checkpoint_in=str(root / "reflective" / "checkpoint"))
    t0 = time.time()
    teacher, _ = _load_ckpt(root / "teacher" / "checkpoint")
    rows, _ = evaluate_samples(teacher, load_split(data, "train"))
    summary = {
        "root": str(root),
        "teacher_train_iou": float(np.mean([r.iou for r in rows])),
        "holdout_reward_reflective": cmd_holdout_reward(root / "reflective" / "checkpoint", data),
        "holdout_reward_grpo": cmd_holdout_reward(root / "grpo" / "checkpoint", data),
    }
    cmd_report(root / "grpo")
    timings["evaluation"] = time.time() - t0
    summary["timings_s"] = timings
    summary["total_s"] = time.time() - t
    (root / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary
