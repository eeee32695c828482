import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from refavs.domain import VOCAB_SIZE
from refavs.losses import (
    bce_loss, dice_loss, distill_loss, sft_loss, stage1_total, stage2_total, stage3_total,
)
from refavs.synthgen import N_VIDEO_CHANNELS

from conftest import TINY, relative_error


def _pixels(rng, B=2, H=6, W=6):
    pix = torch.tensor(rng.normal(size=(B, H, W, N_VIDEO_CHANNELS)))
    slot = torch.tensor(rng.integers(-1, 4, size=(B, H, W)))
    gt = torch.tensor(rng.random((B, H, W)) < 0.4)
    return pix, slot, gt


def test_sft_gradient_through_policy(tiny_policy, tiny_batch, train_samples):
    targets = [s.cot_target.tokens for s in train_samples[:4]]
    tgt = torch.nn.utils.rnn.pad_sequence([torch.tensor(t) for t in targets], batch_first=True)

    def loss():
        logits, lengths, _, _ = tiny_policy.teacher_forcing_forward(tiny_batch, targets)
        return sft_loss(logits, tgt, lengths)

    for p in (tiny_policy.decoder.tok, tiny_policy.decoder.blocks[0].qkv.weight,
              tiny_policy.decoder.ptr_q.weight, tiny_policy.decoder.slot,
              tiny_policy.encoder.video_proj.weight, tiny_policy.encoder.blocks[0].fc1.weight):
        assert relative_error(loss, p) < 1e-4


@pytest.mark.parametrize("loss_fn", [bce_loss, dice_loss])
def test_mask_loss_gradients(tiny_policy, loss_fn, rng):
    pix, slot, gt = _pixels(rng)
    seg = torch.tensor(rng.normal(size=(2, TINY.d)), requires_grad=True)
    md = tiny_policy.mask_decoder

    def loss():
        return loss_fn(md(seg, pix, slot), gt)

    for p in (seg, md.seg_in.weight, md.slot, md.pix_in.weight, md.pix_out.bias):
        assert relative_error(loss, p) < 1e-4


def test_distill_gradient(rng):
    f_t = torch.tensor(rng.normal(size=(3, 8)), requires_grad=True)
    f_s = torch.tensor(rng.normal(size=(3, 8)), requires_grad=True)
    assert relative_error(lambda: distill_loss(f_t, f_s), f_s) < 1e-4
    distill_loss(f_t, f_s).backward()
    assert f_t.grad is None or not f_t.grad.any()


def test_sft_examples():
    V = 120
    target = torch.tensor([3, 7, 1])
    assert sft_loss(torch.zeros(3, V), target).item() == pytest.approx(math.log(V), abs=1e-6)
    sharp = torch.full((3, V), -1e4)
    sharp[torch.arange(3), target] = 0.0
    assert sft_loss(sharp, target).item() == pytest.approx(0.0, abs=1e-6)
    one = torch.randn(1, V)
    assert sft_loss(one, target[:1]).item() == pytest.approx(-one.log_softmax(-1)[0, 3].item(), abs=1e-6)
    with pytest.raises(ValueError):
        sft_loss(torch.zeros(3, V), target[:2])


def test_sft_uniform_over_model_vocab():
    t = torch.tensor([[5, 6, 7, 8]])
    assert sft_loss(torch.zeros(1, 4, VOCAB_SIZE), t).item() == pytest.approx(math.log(VOCAB_SIZE), abs=1e-6)


def test_sft_mean_per_sequence_ignores_padding():
    logits = torch.randn(2, 5, 10)
    tgt = torch.randint(0, 10, (2, 5))
    lengths = torch.tensor([5, 2])
    per = [sft_loss(logits[i, : lengths[i]], tgt[i, : lengths[i]]) for i in range(2)]
    assert sft_loss(logits, tgt, lengths).item() == pytest.approx(((per[0] + per[1]) / 2).item(), rel=1e-6)


def test_distill_examples():
    f = torch.randn(2, 8)
    assert distill_loss(f, f).item() == 0.0
    assert distill_loss(torch.zeros(4), torch.ones(4)).item() == 1.0
    with pytest.raises(ValueError):
        distill_loss(torch.zeros(4), torch.zeros(5))


def test_bce_examples():
    gt = torch.tensor([[1, 0], [0, 1]])
    assert bce_loss(torch.zeros(2, 2), gt).item() == pytest.approx(math.log(2), abs=1e-6)
    assert bce_loss(torch.zeros(1, 1), torch.ones(1, 1)).item() == pytest.approx(0.6931, abs=1e-4)
    assert bce_loss((gt * 2 - 1) * 50.0, gt).item() < 1e-6
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_dice_examples():
    gt = torch.zeros(10, 10)
    gt[:5] = 1
    assert dice_loss((gt * 2 - 1) * 50.0, gt).item() == pytest.approx(0.0, abs=1e-6)
    disjoint = (1 - gt) * 2 - 1
    assert dice_loss(disjoint * 50.0, gt).item() == pytest.approx(1 - 1 / 101, abs=1e-6)
    assert dice_loss(torch.full((4, 4), -50.0), torch.zeros(4, 4)).item() == pytest.approx(0.0, abs=1e-6)


@given(st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_loss_ranges(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 5, 5, generator=g) * 5
    gt = torch.rand(2, 5, 5, generator=g) < 0.5
    assert 0.0 <= dice_loss(logits, gt).item() <= 1.0
    assert bce_loss(logits, gt).item() >= 0.0
    assert sft_loss(torch.randn(4, 9, generator=g), torch.randint(0, 9, (4,), generator=g)).item() >= 0.0


def test_stage_totals_are_exact_sums():
    assert stage1_total(1, 1, 1, 1).total == 4
    assert stage1_total(0, 0, 0, 0).total == 0
    assert stage1_total(0.5, 0.2, 0.1, 0.05).total == pytest.approx(0.85, abs=1e-12)
    assert stage2_total(1, 1, 1).total == 3
    assert stage2_total(0.3, 0.3, 0.4).total == pytest.approx(1.0, abs=1e-12)
    r = stage3_total(-0.2, 0.5, 0.3)
    assert r.total == pytest.approx(0.6, abs=1e-12)
    assert set(r.components) == {"grpo", "bce", "dice"}
    assert stage3_total(-2.0, 0.1, 0.1).total < 0
    assert set(stage2_total(1, 1, 1).components) == {"ce", "bce", "dice"}
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.random(4)
        assert stage1_total(*c).total == c[0] + c[1] + c[2] + c[3]
