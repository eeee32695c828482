"""Group rollouts, group-normalised advantages and the clipped objective (no KL term)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .losses import bce_loss, dice_loss, stage3_total
from .metrics import predict_masks
from .model import DecodeResult, Policy, QueryBatch, stack_queries
from .rewards import RewardBreakdown, score_path

TELEMETRY_COLUMNS = (
    "step", "reward_all", "reward_class", "reward_iou", "reward_format",
    "mean_reasoning_length", "intra_group_std", "loss_total", "grpo", "bce", "dice",
)


@dataclass(frozen=True)
class GrpoConfig:
    G: int = 3
    epsilon: float = 0.2
    temperature: float = 1.0
    beta: float = 0.0
    max_len: int = 96

    def validate(self, training: bool = True) -> None:
        if self.G < (2 if training else 1):
            raise ValueError(f"G must be >= {2 if training else 1}")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta != 0:
            raise ValueError("only beta = 0 is supported")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class Rollout:
    decode: DecodeResult
    old_logprobs: np.ndarray
    mask: Optional[np.ndarray]
    reward: RewardBreakdown


@dataclass
class GroupRollout:
    query_id: str
    rollouts: list
    advantages: np.ndarray
    group_mean: float
    group_std: float


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(R - mean) / population std within the group; all zeros when std < 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty group")
    std = r.std()
    if std < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def grpo_objective(new_logprobs: torch.Tensor, old_logprobs: torch.Tensor, advantages: torch.Tensor,
                   epsilon: float, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Clipped surrogate loss (to minimise) over a group of G responses.

    ``new_logprobs`` / ``old_logprobs`` are (G, L) zero-padded beyond ``lengths``.
    """
    if new_logprobs.shape != old_logprobs.shape:
        raise ValueError(f"logprob shapes differ: {tuple(new_logprobs.shape)} vs {tuple(old_logprobs.shape)}")
    G, L = new_logprobs.shape
    if advantages.shape != (G,):
        raise ValueError(f"need {G} advantages, got {tuple(advantages.shape)}")
    if lengths is None:
        lengths = torch.full((G,), L, dtype=torch.long)
    valid = torch.arange(L)[None] < lengths[:, None]
    ratio = torch.exp(new_logprobs - old_logprobs.detach())
    adv = advantages.to(new_logprobs.dtype)[:, None]
    term = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - epsilon, 1 + epsilon) * adv)
    term = torch.where(valid, term, torch.zeros((), dtype=term.dtype))
    per_seq = term.sum(1) / lengths.to(term.dtype)
    return -per_seq.mean()


def _derived_seeds(seed: int, n: int) -> list[int]:
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def rollout_groups(policy: Policy, samples, qb: QueryBatch, config: GrpoConfig, seed: int) -> list[GroupRollout]:
    """G sample-mode decodes per query, scored and normalised within each group."""
    G = config.G
    rep = qb.repeat(G)
    seeds = _derived_seeds(seed, len(samples) * G)
    decs = policy.decode_batch(rep, "sample", config.temperature, config.max_len, seeds)
    masks = predict_masks(policy, rep, decs)
    groups = []
    for q, s in enumerate(samples):
        rolls = []
        for g in range(G):
            k = q * G + g
            d = decs[k]
            rew = score_path(d.tokens, masks[k], s.gt_mask, s.gt_class)
            rolls.append(Rollout(d, d.logprobs.copy(), masks[k], rew))
        totals = np.array([r.reward.total for r in rolls])
        for r in rolls:
            r.old_logprobs.setflags(write=False)
        groups.append(GroupRollout(s.sample_id, rolls, compute_advantages(totals),
                                   float(totals.mean()), float(totals.std())))
    return groups


def rollout_group(policy: Policy, sample, config: GrpoConfig, seed: int) -> GroupRollout:
    config.validate(training=False)
    return rollout_groups(policy, [sample], stack_queries([sample.query], policy.dtype), config, seed)[0]


def mean_group_reward(policy: Policy, samples, config: GrpoConfig, seed: int, qb: Optional[QueryBatch] = None,
                      chunk: int = 32) -> float:
    """Mean total reward of sampled rollouts over a query set."""
    if qb is None:
        qb = stack_queries([s.query for s in samples])
    totals = []
    for start in range(0, len(samples), chunk):
        idx = list(range(start, min(start + chunk, len(samples))))
        groups = rollout_groups(policy, [samples[i] for i in idx], qb.index(idx), config, seed + start)
        totals.extend(r.reward.total for g in groups for r in g.rollouts)
    return float(np.mean(totals))


def _mask_losses(policy: Policy, qb: QueryBatch, samples, greedy: list[DecodeResult]):
    idx = [i for i, d in enumerate(greedy) if d.stop_reason == "seg_emitted"]
    zero = torch.zeros((), dtype=policy.dtype)
    if not idx:
        return zero, zero
    sub = qb.index(idx)
    _, _, _, mask_logits = policy.teacher_forcing_forward(sub, [greedy[i].tokens for i in idx])
    gt = torch.tensor(np.stack([samples[i].gt_mask for i in idx]), dtype=policy.dtype)
    return bce_loss(mask_logits, gt), dice_loss(mask_logits, gt)


def grpo_step(policy: Policy, optimizer, samples, qb: QueryBatch, config: GrpoConfig, step: int, seed: int,
              micro_batch: int = 2, grad_clip: Optional[float] = 1.0) -> dict:
    """One optimizer update on grpo + bce + dice; returns a telemetry row."""
    groups = rollout_groups(policy, samples, qb, config, seed)
    greedy = policy.decode_batch(qb, "greedy", max_len=config.max_len)
    n_micro = max(1, -(-len(samples) // micro_batch))
    optimizer.zero_grad(set_to_none=True)
    comps = {"loss_total": 0.0, "grpo": 0.0, "bce": 0.0, "dice": 0.0}
    for m in range(n_micro):
        idx = list(range(m * micro_batch, min((m + 1) * micro_batch, len(samples))))
        sub = qb.index(idx)
        rolls = [r for i in idx for r in groups[i].rollouts]
        lp, lengths, _ = policy.sequence_logprobs(sub.repeat(config.G), [r.decode.tokens for r in rolls],
                                                  config.temperature)
        old = torch.zeros_like(lp)
        for k, r in enumerate(rolls):
            old[k, : len(r.old_logprobs)] = torch.tensor(np.array(r.old_logprobs), dtype=lp.dtype)
        terms = []
        for j, i in enumerate(idx):
            sl = slice(j * config.G, (j + 1) * config.G)
            terms.append(grpo_objective(lp[sl], old[sl], torch.as_tensor(groups[i].advantages),
                                        config.epsilon, lengths[sl]))
        grpo = torch.stack(terms).mean()
        bce, dice = _mask_losses(policy, sub, [samples[i] for i in idx], [greedy[i] for i in idx])
        report = stage3_total(grpo, bce, dice)
        (report.total / n_micro).backward()
        for k, v in report.floats().items():
            comps[k] += v / n_micro
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(policy.trainable_parameters(), grad_clip)
    optimizer.step()
    rewards = [r.reward for g in groups for r in g.rollouts]
    row = {
        "step": step,
        "reward_all": float(np.mean([r.total for r in rewards])),
        "reward_class": float(np.mean([r.cls for r in rewards])),
        "reward_iou": float(np.mean([r.iou for r in rewards])),
        "reward_format": float(np.mean([r.format for r in rewards])),
        "mean_reasoning_length": float(np.mean([len(r.decode.tokens) for g in groups for r in g.rollouts])),
        "intra_group_std": float(np.mean([g.group_std for g in groups])),
    }
    row.update(comps)
    return row
