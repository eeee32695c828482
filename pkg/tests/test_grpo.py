import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from refavs.grpo import (
    TELEMETRY_COLUMNS, GrpoConfig, compute_advantages, grpo_objective, grpo_step, rollout_group,
)
from refavs.model import stack_queries


def test_advantage_examples():
    np.testing.assert_allclose(compute_advantages([0, 1, 2]), [-1.2247, 0, 1.2247], atol=1e-4)
    assert not compute_advantages([0.7, 0.7, 0.7]).any()
    assert compute_advantages([2.5]).tolist() == [0.0]
    with pytest.raises(ValueError):
        compute_advantages([])


@given(st.lists(st.floats(0, 3), min_size=2, max_size=8), st.floats(-5, 5), st.floats(0.1, 10))
@settings(max_examples=200, deadline=None)
def test_advantage_normalised_and_invariant(rewards, shift, scale):
    r = np.array(rewards)
    a = compute_advantages(r)
    if r.std() < 1e-8:
        assert not a.any()
        return
    assert abs(a.mean()) < 1e-6 and abs(a.std() - 1) < 1e-6
    if r.std() > 1e-3:
        np.testing.assert_allclose(compute_advantages(r + shift), a, atol=1e-9)
        np.testing.assert_allclose(compute_advantages(r * scale), a, atol=1e-9)


def _one_token(ratio, adv):
    old = torch.zeros(1, 1, dtype=torch.float64)
    new = torch.full((1, 1), np.log(ratio), dtype=torch.float64)
    return grpo_objective(new, old, torch.tensor([adv], dtype=torch.float64), 0.2).item()


def test_clip_examples():
    assert _one_token(2.0, 1.0) == pytest.approx(-1.2, abs=1e-12)
    assert _one_token(0.5, -1.0) == pytest.approx(0.8, abs=1e-12)


def test_ratio_one_loss_is_mean_advantage():
    adv = torch.tensor([1.0, -0.5, -0.5], dtype=torch.float64)
    lp = torch.randn(3, 5, dtype=torch.float64)
    lengths = torch.tensor([5, 3, 1])
    assert grpo_objective(lp, lp.clone(), adv, 0.2, lengths).item() == pytest.approx(-adv.mean().item(), abs=1e-12)


def test_ratio_one_gradient_is_policy_gradient():
    g = torch.Generator().manual_seed(0)
    lp = torch.randn(4, 6, dtype=torch.float64, generator=g)
    adv = torch.randn(4, dtype=torch.float64, generator=g)
    lengths = torch.tensor([6, 4, 2, 5])
    new = lp.clone().requires_grad_(True)
    grpo_objective(new, lp.clone(), adv, 0.2, lengths).backward()
    pg = lp.clone().requires_grad_(True)
    valid = torch.arange(6)[None] < lengths[:, None]
    (-(adv / lengths * (pg * valid).sum(1)).mean()).backward()
    assert torch.allclose(new.grad, pg.grad, atol=1e-6)


def test_no_gradient_into_old_logprobs():
    new = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    old = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    grpo_objective(new, old, torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64), 0.2).backward()
    assert old.grad is None or not old.grad.any()


def test_clip_inactive_equals_unclipped():
    rng = np.random.default_rng(3)
    for _ in range(50):
        old = torch.tensor(rng.normal(size=(3, 5)))
        new = old + torch.tensor(rng.uniform(np.log(0.81), np.log(1.19), size=(3, 5)))
        adv = torch.tensor(rng.normal(size=3))
        ratio = torch.exp(new - old)
        unclipped = -(ratio * adv[:, None]).mean(1).mean()
        assert grpo_objective(new, old, adv, 0.2).item() == unclipped.item()


def test_objective_shape_checks():
    with pytest.raises(ValueError):
        grpo_objective(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2), 0.2)
    with pytest.raises(ValueError):
        grpo_objective(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3), 0.2)


def test_config_validation():
    GrpoConfig().validate()
    assert GrpoConfig().G == 3
    for bad in [GrpoConfig(G=1), GrpoConfig(epsilon=0.0), GrpoConfig(beta=0.1), GrpoConfig(temperature=0)]:
        with pytest.raises(ValueError):
            bad.validate()
    GrpoConfig(G=1).validate(training=False)


def test_rollout_group_reproducible(tiny_policy, train_samples):
    cfg = GrpoConfig(max_len=30)
    a = rollout_group(tiny_policy, train_samples[0], cfg, seed=11)
    b = rollout_group(tiny_policy, train_samples[0], cfg, seed=11)
    assert [r.decode.tokens for r in a.rollouts] == [r.decode.tokens for r in b.rollouts]
    assert len(a.rollouts) == 3 and a.advantages.shape == (3,)
    for r in a.rollouts:
        assert not r.old_logprobs.flags.writeable
        if r.decode.stop_reason != "seg_emitted":
            assert r.mask is None and r.reward.format == 0.0 and r.reward.iou == 0.0
    totals = [r.reward.total for r in a.rollouts]
    np.testing.assert_allclose(a.advantages, compute_advantages(totals))


def test_grpo_step_telemetry_and_freeze(tiny_policy, train_samples):
    tiny_policy.freeze("mask_decoder")
    samples = train_samples[:2]
    qb = stack_queries([s.query for s in samples], tiny_policy.dtype)
    before = {k: v.clone() for k, v in tiny_policy.mask_decoder.state_dict().items()}
    tok = tiny_policy.decoder.tok.detach().clone()
    opt = torch.optim.Adam(tiny_policy.trainable_parameters(), lr=1e-2)
    row = grpo_step(tiny_policy, opt, samples, qb, GrpoConfig(max_len=30), step=1, seed=5)
    assert set(row) == set(TELEMETRY_COLUMNS)
    parts = row["reward_format"] + row["reward_iou"] + row["reward_class"]
    assert row["reward_all"] == pytest.approx(parts, abs=1e-12)
    assert row["loss_total"] == pytest.approx(row["grpo"] + row["bce"] + row["dice"], abs=1e-12)
    for k, v in tiny_policy.mask_decoder.state_dict().items():
        assert torch.equal(v, before[k])
    if row["intra_group_std"] > 0:
        assert not torch.equal(tok, tiny_policy.decoder.tok)
