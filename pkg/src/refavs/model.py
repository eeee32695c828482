"""Toy multimodal policy: pooled audio/video/text encoder, causal decoder, mask decoder.

The decoder runs over ``[prefix states ; BOS y_1 .. y_n]`` with a prefix-LM
mask. The hidden state (after the final layer norm) at the position whose
input is ``[SEG]`` is the segmentation embedding fed to the mask decoder.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .domain import (
    BOS_ID, CLASS_REGISTRY, CLASS_SIGNATURES, CLASS_TOKEN_IDS, EOS_ID, PAD_ID, SEG_ID, SIGNATURE_DIM,
    VOCAB_SIZE, Query,
)
from .synthgen import (
    CH_ACT, CH_AREA, CH_CX, CH_CY, CH_OBJ, GRID, MAX_OBJECTS, N_VIDEO_CHANNELS, SIG, envelope_peak,
)

CHECKPOINT_VERSION = 1
TEXT_SLOTS = 12
GROUPS = ("encoder", "decoder", "mask_decoder")

VIDEO_TOKEN_DIM = 1 + 4 + 4
AUDIO_TOKEN_DIM = 1 + 4 + 4


@dataclass(frozen=True)
class Dims:
    d: int = 64
    n_heads: int = 4
    n_layers: int = 4
    n_enc_layers: int = 2
    mlp_mult: int = 4
    mask_hidden: int = 32
    max_len: int = 160
    grid_h: int = GRID[0]
    grid_w: int = GRID[1]

    @property
    def n_video_tokens(self) -> int:
        return MAX_OBJECTS

    @property
    def prefix_len(self) -> int:
        return self.n_video_tokens + MAX_OBJECTS + TEXT_SLOTS


# ---------------------------------------------------------------- pooling (fixed, not learned)

def _is_max(values: np.ndarray) -> np.ndarray:
    """1.0 where the value equals the maximum, else 0.0."""
    return (values >= values.max()).astype(float)


def _class_of(sig: np.ndarray) -> int:
    hit = np.nonzero(np.abs(CLASS_SIGNATURES - sig).max(axis=1) < 1e-3)[0]
    if len(hit) != 1:
        raise ValueError("slot signature matches no registered class")
    return int(hit[0])


@dataclass(frozen=True)
class PooledVideo:
    tokens: np.ndarray  # (MAX_OBJECTS, VIDEO_TOKEN_DIM)
    classes: np.ndarray  # (MAX_OBJECTS,) class index per slot, -1 when empty
    pix_slot: np.ndarray  # (H, W) slot index per pixel, -1 for background


@dataclass(frozen=True)
class PooledAudio:
    tokens: np.ndarray  # (MAX_OBJECTS, AUDIO_TOKEN_DIM)
    classes: np.ndarray  # (MAX_OBJECTS,)


def pool_video(video: np.ndarray) -> PooledVideo:
    """One slot per object instance (pixels grouped by centroid), ordered left to right.

    Slot: present, centroid, area, activity, slot position, leftmost / rightmost / largest flags.
    """
    tokens = np.zeros((MAX_OBJECTS, VIDEO_TOKEN_DIM))
    classes = np.full(MAX_OBJECTS, -1)
    pix_slot = np.full(video.shape[:2], -1)
    obj = video[..., CH_OBJ] > 0.5
    cents = np.unique(video[obj][:, [CH_CX, CH_CY]], axis=0)
    if len(cents) > MAX_OBJECTS:
        raise ValueError(f"more than {MAX_OBJECTS} objects in video")
    cents = cents[np.lexsort((cents[:, 1], cents[:, 0]))]
    n = len(cents)
    for i, (cx, cy) in enumerate(cents):
        m = obj & (video[..., CH_CX] == cx) & (video[..., CH_CY] == cy)
        px = video[m]
        pix_slot[m] = i
        classes[i] = _class_of(px[:, SIG].mean(0))
        tokens[i, :5] = (1.0, cx, cy, px[:, CH_AREA].mean(), px[:, CH_ACT].mean())
    if n:
        tokens[:n, 5] = np.arange(n) / (MAX_OBJECTS - 1)
        tokens[0, 6] = 1.0
        tokens[n - 1, 7] = 1.0
        tokens[:n, 8] = _is_max(np.round(tokens[:n, 3], 4))
    return PooledVideo(tokens, classes, pix_slot)


def pool_audio(audio: np.ndarray) -> PooledAudio:
    """One slot per sounding class band, ordered loudest first (then onset, then name).

    Slot: present, loudness, onset, duration, end, then flags marking the earliest onset,
    latest onset, longest duration and quietest event.
    """
    T, C = audio.shape
    names = [c.name for c in CLASS_REGISTRY[:C]]
    events = []
    for c in range(C):
        band = audio[:, c]
        on = np.nonzero(band > 0)[0]
        if len(on) == 0:
            continue
        onset, end = int(on[0]), int(on[-1]) + 1
        dur = end - onset
        loud = round(float(band.max() / envelope_peak(dur)), 2)
        events.append((-loud, onset, names[c], c, dur, end))
    events.sort()
    if len(events) > MAX_OBJECTS:
        raise ValueError(f"more than {MAX_OBJECTS} sounding bands")
    tokens = np.zeros((MAX_OBJECTS, AUDIO_TOKEN_DIM))
    classes = np.full(MAX_OBJECTS, -1)
    n = len(events)
    if n:
        ev = np.array([(-e[0], e[1], e[4], e[5]) for e in events], dtype=float)
        classes[:n] = [e[3] for e in events]
        tokens[:n, 0] = 1.0
        tokens[:n, 1:5] = ev * [1.0, 1 / T, 1 / T, 1 / T]
        tokens[:n, 5] = _is_max(-ev[:, 1])
        tokens[:n, 6] = _is_max(ev[:, 1])
        tokens[:n, 7] = _is_max(ev[:, 2])
        tokens[:n, 8] = _is_max(-ev[:, 0])
    return PooledAudio(tokens, classes)


def pool_video_tokens(video: np.ndarray) -> np.ndarray:
    return pool_video(video).tokens


def pool_audio_tokens(audio: np.ndarray) -> np.ndarray:
    return pool_audio(audio).tokens


@dataclass
class QueryBatch:
    video_tokens: torch.Tensor  # (B, S, VIDEO_TOKEN_DIM)
    audio_tokens: torch.Tensor  # (B, S, AUDIO_TOKEN_DIM)
    text_ids: torch.Tensor  # (B, TEXT_SLOTS) long
    text_pad: torch.Tensor  # (B, TEXT_SLOTS) bool
    pix: torch.Tensor  # (B, H, W, C_v)
    class_slot: torch.Tensor  # (B, V) long: video slot showing each class token, -1 if absent
    audio_slot: torch.Tensor  # (B, S) long: video slot of each audio slot's source, -1 if none
    pix_slot: torch.Tensor  # (B, H, W) long

    def __len__(self) -> int:
        return self.video_tokens.shape[0]

    def index(self, idx) -> "QueryBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return QueryBatch(*(getattr(self, f.name)[idx] for f in fields(self)))

    def repeat(self, n: int) -> "QueryBatch":
        """Each query repeated ``n`` times consecutively."""
        return self.index(torch.arange(len(self)).repeat_interleave(n))

    def to(self, dtype) -> "QueryBatch":
        return QueryBatch(self.video_tokens.to(dtype), self.audio_tokens.to(dtype), self.text_ids, self.text_pad,
                          self.pix.to(dtype), self.class_slot, self.audio_slot, self.pix_slot)


def stack_queries(queries: Sequence[Query], dtype=torch.float32) -> QueryBatch:
    B = len(queries)
    vt = np.zeros((B, MAX_OBJECTS, VIDEO_TOKEN_DIM))
    at = np.zeros((B, MAX_OBJECTS, AUDIO_TOKEN_DIM))
    ids = np.full((B, TEXT_SLOTS), PAD_ID, dtype=np.int64)
    class_slot = np.full((B, VOCAB_SIZE), -1, dtype=np.int64)
    audio_slot = np.full((B, MAX_OBJECTS), -1, dtype=np.int64)
    pix_slot = []
    class_tok = np.array([CLASS_TOKEN_IDS[c.name] for c in CLASS_REGISTRY])
    for i, q in enumerate(queries):
        pv, pa = pool_video(q.video), pool_audio(q.audio)
        vt[i], at[i] = pv.tokens, pa.tokens
        pix_slot.append(pv.pix_slot)
        for k, c in enumerate(pv.classes):
            if c >= 0:
                class_slot[i, class_tok[c]] = k
        for k, c in enumerate(pa.classes):
            if c >= 0:
                audio_slot[i, k] = class_slot[i, class_tok[c]]
        text = list(q.instruction) + list(q.reference)
        if len(text) > TEXT_SLOTS:
            raise ValueError(f"instruction + reference longer than {TEXT_SLOTS} tokens")
        ids[i, : len(text)] = text
    pix = np.stack([q.video for q in queries])
    return QueryBatch(torch.tensor(vt, dtype=dtype), torch.tensor(at, dtype=dtype), torch.tensor(ids),
                      torch.tensor(ids == PAD_ID), torch.tensor(pix, dtype=dtype), torch.tensor(class_slot),
                      torch.tensor(audio_slot), torch.tensor(np.stack(pix_slot)))


def _slot_gather(emb: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """``emb[slots]`` with zeros where ``slots`` is -1."""
    out = emb[slots.clamp(min=0)]
    return out * (slots >= 0)[..., None].to(out.dtype)


# ---------------------------------------------------------------- modules

class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, mlp_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_mult * d)
        self.fc2 = nn.Linear(mlp_mult * d, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor, past=None, return_kv: bool = False):
        """``allowed`` is (B, N_query, N_key); ``past`` holds cached (K, V) for earlier keys."""
        B, N, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(B, N, h, d // h).transpose(1, 2) for t in (q, k, v))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        att = att.masked_fill(~allowed[:, None], float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, N, d)
        x = x + self.proj(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return (x, (k, v)) if return_kv else x


class Encoder(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        self.video_proj = nn.Linear(VIDEO_TOKEN_DIM, dims.d)
        self.audio_proj = nn.Linear(AUDIO_TOKEN_DIM, dims.d)
        self.pos = nn.Parameter(torch.randn(dims.prefix_len, dims.d) * 0.1)
        self.blocks = nn.ModuleList(Block(dims.d, dims.n_heads, dims.mlp_mult)
                                    for _ in range(dims.n_enc_layers))
        self.ln = nn.LayerNorm(dims.d)


class Decoder(nn.Module):
    """Token embeddings, the causal stack and the tied output head.

    Class-name tokens carry no learned identity: a class token is embedded as a shared vector plus
    the embedding of the video slot that shows that class in the current scene (or a shared
    "absent" vector). Class identity therefore enters only through the scene, which lets the
    policy name classes it never saw during training.
    """

    def __init__(self, dims: Dims):
        super().__init__()
        self.tok = nn.Parameter(torch.randn(VOCAB_SIZE, dims.d) * 0.5)
        self.class_shared = nn.Parameter(torch.zeros(dims.d))
        self.class_absent = nn.Parameter(torch.randn(dims.d) * 0.1)
        self.slot = nn.Parameter(torch.randn(MAX_OBJECTS, dims.d) * 0.5)
        self.ptr_q = nn.Linear(dims.d, dims.d)
        self.ptr_k = nn.Linear(dims.d, dims.d)
        self.pos = nn.Parameter(torch.randn(dims.max_len + 1, dims.d) * 0.1)
        self.blocks = nn.ModuleList(Block(dims.d, dims.n_heads, dims.mlp_mult)
                                    for _ in range(dims.n_layers))
        self.ln_f = nn.LayerNorm(dims.d)
        is_class = torch.zeros(VOCAB_SIZE, 1)
        is_class[list(CLASS_TOKEN_IDS.values())] = 1.0
        self.register_buffer("is_class", is_class, persistent=False)
        # [PAD] and [BOS] are never emitted
        input_only = torch.zeros(VOCAB_SIZE)
        input_only[[PAD_ID, BOS_ID]] = float("-inf")
        self.register_buffer("input_only", input_only, persistent=False)

    def embedding_table(self, class_slot: torch.Tensor) -> torch.Tensor:
        """(B, V, d) table for a batch of scenes."""
        present = (class_slot >= 0)[..., None].to(self.tok.dtype)
        cls = self.class_shared + _slot_gather(self.slot, class_slot) + (1 - present) * self.class_absent
        return self.tok * (1 - self.is_class) + self.is_class * cls


class MaskDecoder(nn.Module):
    """Per-pixel score: the [SEG] query against the embedding of the object slot the pixel belongs to,
    plus a bias from the pixel's own features."""

    def __init__(self, dims: Dims):
        super().__init__()
        self.seg_in = nn.Linear(dims.d, dims.mask_hidden)
        self.slot = nn.Parameter(torch.randn(MAX_OBJECTS, dims.mask_hidden))
        self.pix_in = nn.Linear(N_VIDEO_CHANNELS - SIGNATURE_DIM, dims.mask_hidden)
        self.pix_out = nn.Linear(dims.mask_hidden, 1)

    def forward(self, seg: torch.Tensor, pix: torch.Tensor, pix_slot: torch.Tensor) -> torch.Tensor:
        q = self.seg_in(seg)[:, None, None, :]
        match = (q * _slot_gather(self.slot, pix_slot)).sum(-1) / math.sqrt(self.slot.shape[1])
        return match + self.pix_out(F.gelu(self.pix_in(pix[..., SIGNATURE_DIM:])))[..., 0]


@dataclass
class Prefix:
    projected: torch.Tensor  # (B, P, d) before the attention stack
    states: torch.Tensor  # (B, P, d)
    pad: torch.Tensor  # (B, P) bool
    table: torch.Tensor  # (B, V, d) per-scene token table
    route: torch.Tensor  # (B, 2 * MAX_OBJECTS, V) bool, video/audio slot shows class token


@dataclass
class DecodeResult:
    tokens: tuple[int, ...]
    logprobs: np.ndarray
    hidden_states: np.ndarray
    stop_reason: str  # "seg_emitted" | "max_len" | "eos"

    @property
    def seg_embedding(self) -> Optional[np.ndarray]:
        return self.hidden_states[-1] if self.stop_reason == "seg_emitted" else None


class Policy(nn.Module):
    def __init__(self, dims: Dims = Dims(), role_tag: str = "student"):
        super().__init__()
        if role_tag not in ("teacher", "student"):
            raise ValueError(role_tag)
        self.dims = dims
        self.role_tag = role_tag
        self.frozen: set[str] = set()
        self.encoder = Encoder(dims)
        self.decoder = Decoder(dims)
        self.mask_decoder = MaskDecoder(dims)

    # -- parameter groups
    def freeze(self, group: str) -> None:
        if group not in GROUPS:
            raise ValueError(group)
        self.frozen.add(group)
        for p in getattr(self, group).parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for g in GROUPS if g not in self.frozen for p in getattr(self, g).parameters()]

    @property
    def dtype(self):
        return self.decoder.tok.dtype

    # -- forward pieces
    def encode(self, qb: QueryBatch) -> Prefix:
        enc, dec = self.encoder, self.decoder
        qb = qb.to(self.dtype)
        table = dec.embedding_table(qb.class_slot)
        B = len(qb)
        shown = torch.where(qb.video_tokens[..., 0] > 0.5, torch.arange(MAX_OBJECTS), -1)
        video = enc.video_proj(qb.video_tokens) + _slot_gather(dec.slot, shown)
        audio = enc.audio_proj(qb.audio_tokens) + _slot_gather(dec.slot, qb.audio_slot)
        text = table[torch.arange(B)[:, None], qb.text_ids]
        projected = torch.cat([video, audio, text], dim=1)
        P = projected.shape[1]
        pad = torch.cat([torch.zeros(B, P - TEXT_SLOTS, dtype=torch.bool), qb.text_pad], dim=1)
        allowed = (~pad)[:, None, :].expand(B, P, P) | torch.eye(P, dtype=torch.bool)
        x = projected + enc.pos
        for blk in enc.blocks:
            x = blk(x, allowed)
        shows = torch.cat([shown, qb.audio_slot], dim=1)[:, :, None]
        route = (shows == qb.class_slot[:, None, :]) & (qb.class_slot[:, None, :] >= 0)
        return Prefix(projected, enc.ln(x), pad, table, route)

    def _logits(self, h: torch.Tensor, prefix: Prefix) -> torch.Tensor:
        """Tied output logits plus a pointer term: class tokens score the slots that show them."""
        dec = self.decoder
        keys = dec.ptr_k(prefix.states[:, : prefix.route.shape[1]])
        score = dec.ptr_q(h) @ keys.transpose(-1, -2) / math.sqrt(keys.shape[-1])  # (B, L, 2M)
        routed = score[..., None].masked_fill(~prefix.route[:, None], float("-inf"))
        ptr = torch.logsumexp(routed, dim=2)
        ptr = torch.where(prefix.route.any(1)[:, None], ptr, torch.zeros_like(ptr))
        return h @ prefix.table.transpose(-1, -2) + ptr + dec.input_only

    def decoder_forward(self, prefix: Prefix, tgt_in: torch.Tensor, tgt_pad: Optional[torch.Tensor] = None,
                        return_kv: bool = False):
        """Hidden states (post final norm) and logits at the target positions."""
        dec = self.decoder
        B, L = tgt_in.shape
        P = prefix.states.shape[1]
        if L > dec.pos.shape[0]:
            raise ValueError(f"target length {L} exceeds max_len + 1")
        if tgt_pad is None:
            tgt_pad = tgt_in == PAD_ID
        emb = prefix.table[torch.arange(B)[:, None], tgt_in]
        x = torch.cat([prefix.states, emb + dec.pos[:L]], dim=1)
        N = P + L
        pad = torch.cat([prefix.pad, tgt_pad], dim=1)
        idx = torch.arange(N)
        causal = (idx[None, :] < P) | (idx[None, :] <= idx[:, None])
        allowed = (causal[None] & ~pad[:, None, :]) | torch.eye(N, dtype=torch.bool)
        cache = []
        for blk in dec.blocks:
            if return_kv:
                x, kv = blk(x, allowed, return_kv=True)
                cache.append(kv)
            else:
                x = blk(x, allowed)
        h = dec.ln_f(x[:, P:])
        logits = self._logits(h, prefix)
        return (h, logits, cache) if return_kv else (h, logits)

    def _decode_step(self, tokens: torch.Tensor, position: int, cache: list, key_ok: torch.Tensor,
                     prefix: Prefix):
        """Feed one token per row at ``position``; extends ``cache`` in place."""
        dec = self.decoder
        emb = prefix.table[torch.arange(len(tokens)), tokens]
        x = (emb + dec.pos[position])[:, None]
        allowed = key_ok[:, None, :]
        for i, blk in enumerate(dec.blocks):
            x, cache[i] = blk(x, allowed, past=cache[i], return_kv=True)
        h = dec.ln_f(x)
        return h[:, 0], self._logits(h, prefix)[:, 0]

    def mask_decode(self, seg: torch.Tensor, qb: QueryBatch) -> torch.Tensor:
        return self.mask_decoder(seg, qb.pix.to(self.dtype), qb.pix_slot)

    def teacher_forcing_forward(self, qb: QueryBatch, targets: Sequence[Sequence[int]],
                                prefix: Optional[Prefix] = None):
        """Logits (B, Lmax, V) for every target position, lengths, seg embeddings, mask logits.

        Every target must end with ``[SEG]``.
        """
        for t in targets:
            if len(t) == 0 or t[-1] != SEG_ID:
                raise ValueError("target must end with [SEG]")
        if prefix is None:
            prefix = self.encode(qb)
        tgt_in, lengths = pad_targets(targets, with_bos=True)
        h, logits = self.decoder_forward(prefix, tgt_in)
        rows = torch.arange(len(targets))
        seg = h[rows, lengths]
        return logits[:, :-1], lengths, seg, self.mask_decode(seg, qb)

    def sequence_logprobs(self, qb: QueryBatch, tokens: Sequence[Sequence[int]], temperature: float = 1.0,
                          prefix: Optional[Prefix] = None):
        """Per-token logprobs (B, Lmax) zero-padded, lengths, and last-position hidden states."""
        if prefix is None:
            prefix = self.encode(qb)
        tgt_in, lengths = pad_targets(tokens, with_bos=True)
        h, logits = self.decoder_forward(prefix, tgt_in)
        tgt = tgt_in[:, 1:]
        lp = token_logprobs(logits[:, :-1], tgt, temperature)
        valid = torch.arange(tgt.shape[1])[None] < lengths[:, None]
        rows = torch.arange(len(tokens))
        return torch.where(valid, lp, torch.zeros((), dtype=lp.dtype)), lengths, h[rows, lengths]

    @torch.no_grad()
    def decode_batch(self, qb: QueryBatch, mode: str = "greedy", temperature: float = 1.0,
                     max_len: Optional[int] = None, seeds: Optional[Sequence[int]] = None
                     ) -> list[DecodeResult]:
        max_len = self.dims.max_len if max_len is None else max_len
        if max_len < 3:
            raise ValueError("max_len must be >= 3")
        if max_len > self.dims.max_len:
            raise ValueError(f"max_len {max_len} exceeds model max_len {self.dims.max_len}")
        if mode not in ("greedy", "sample"):
            raise ValueError(mode)
        B = len(qb)
        prefix = self.encode(qb)
        if mode == "sample":
            if seeds is None or len(seeds) != B:
                raise ValueError("sample mode needs one seed per row")
            noise = torch.tensor(np.stack([np.random.default_rng(s).gumbel(size=(max_len, VOCAB_SIZE))
                                           for s in seeds]), dtype=self.dtype)
        seq = torch.full((B, 1), BOS_ID, dtype=torch.long)
        _, logits, cache = self.decoder_forward(prefix, seq, return_kv=True)
        last = logits[:, -1]
        key_ok = torch.cat([~prefix.pad, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        done = torch.zeros(B, dtype=torch.bool)
        stop = ["max_len"] * B
        lps = torch.zeros(B, max_len, dtype=self.dtype)
        hs = torch.zeros(B, max_len, self.dims.d, dtype=self.dtype)
        n = torch.zeros(B, dtype=torch.long)
        toks = []
        for t in range(max_len):
            if mode == "greedy":
                logp = last.log_softmax(-1)
                nxt = last.argmax(-1)
            else:
                scaled = last / temperature
                logp = scaled.log_softmax(-1)
                nxt = (scaled + noise[:, t]).argmax(-1)
            live = ~done
            nxt = torch.where(live, nxt, torch.full_like(nxt, PAD_ID))
            lps[:, t] = torch.where(live, logp.gather(1, nxt[:, None])[:, 0], torch.zeros((), dtype=lps.dtype))
            n += live.long()
            toks.append(nxt)
            for i in torch.nonzero(live & (nxt == SEG_ID))[:, 0].tolist():
                stop[i] = "seg_emitted"
            for i in torch.nonzero(live & (nxt == EOS_ID))[:, 0].tolist():
                stop[i] = "eos"
            key_ok = torch.cat([key_ok, live[:, None]], dim=1)
            h, logits = self._decode_step(nxt, t + 1, cache, key_ok, prefix)
            hs[:, t] = h
            last = logits
            done = done | (nxt == SEG_ID) | (nxt == EOS_ID)
            if bool(done.all()):
                break
        seq = torch.stack(toks, dim=1)
        out = []
        for i in range(B):
            k = int(n[i])
            out.append(DecodeResult(tuple(seq[i, :k].tolist()), lps[i, :k].double().numpy(),
                                    hs[i, :k].double().numpy(), stop[i]))
        return out


# ---------------------------------------------------------------- functional helpers

def pad_targets(targets: Sequence[Sequence[int]], with_bos: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    L = int(lengths.max()) + (1 if with_bos else 0)
    out = torch.full((len(targets), L), PAD_ID, dtype=torch.long)
    off = 1 if with_bos else 0
    for i, t in enumerate(targets):
        if with_bos:
            out[i, 0] = BOS_ID
        out[i, off:off + len(t)] = torch.tensor(list(t), dtype=torch.long)
    return out, lengths


def token_logprobs(logits: torch.Tensor, tokens: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    lp = (logits / temperature).log_softmax(-1)
    return lp.gather(-1, tokens.clamp(min=0)[..., None])[..., 0]


def init_params(seed: int, dims: Dims = Dims(), role_tag: str = "student", dtype=torch.float32) -> Policy:
    for name, v in asdict(dims).items():
        if v <= 0:
            raise ValueError(f"dims.{name} must be positive")
    if dims.d % dims.n_heads:
        raise ValueError("d must be divisible by n_heads")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        policy = Policy(dims, role_tag)
    return policy.to(dtype)


def encode(policy: Policy, query: Query) -> Prefix:
    return policy.encode(stack_queries([query]))


def decode(policy: Policy, query: Query, mode: str = "greedy", temperature: float = 1.0,
           max_len: Optional[int] = None, seed: int = 0) -> DecodeResult:
    return policy.decode_batch(stack_queries([query]), mode, temperature, max_len, [seed])[0]


def logprobs_under(policy: Policy, query: Query, tokens: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    if len(tokens) == 0:
        raise ValueError("tokens must be non-empty")
    with torch.no_grad():
        lp, lengths, _ = policy.sequence_logprobs(stack_queries([query]), [tokens], temperature)
    return lp[0, : len(tokens)].double().numpy()


def mask_decode(policy: Policy, seg, query: Query) -> np.ndarray:
    seg = torch.as_tensor(np.asarray(seg), dtype=policy.dtype)[None]
    if not torch.isfinite(seg).all():
        raise ValueError("seg embedding must be finite")
    with torch.no_grad():
        return policy.mask_decode(seg, stack_queries([query]))[0].double().numpy()


# ---------------------------------------------------------------- checkpoints

def _format_array(name: str, t: torch.Tensor) -> str:
    arr = t.detach().cpu()
    shape = " ".join(str(s) for s in arr.shape) or "-"
    vals = " ".join(repr(float(x)) for x in arr.reshape(-1).tolist())
    return f"{name} {str(arr.dtype).replace('torch.', '')} {shape}\n{vals}\n"


def save_checkpoint(policy: Policy, path, provenance: Optional[dict] = None) -> str:
    """Write ``manifest.json`` + ``params.txt`` atomically; returns the params sha256."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    body = "".join(_format_array(k, v) for k, v in policy.state_dict().items())
    digest = hashlib.sha256(body.encode()).hexdigest()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dims": asdict(policy.dims),
        "role_tag": policy.role_tag,
        "frozen": sorted(policy.frozen),
        "provenance": provenance or {},
        "params_sha256": digest,
    }
    for name, text in (("params.txt", body), ("manifest.json", json.dumps(manifest, indent=1) + "\n")):
        tmp = path / (name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path / name)
    return digest


def load_checkpoint(path) -> tuple[Policy, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        lines = (path / "params.txt").read_text().splitlines()
    except OSError as e:
        raise FileNotFoundError(f"{path}: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    dims = Dims(**manifest["dims"])
    state = {}
    for header, vals in zip(lines[0::2], lines[1::2]):
        name, dtype, *shape = header.split()
        shape = [] if shape == ["-"] else [int(s) for s in shape]
        data = [float(v) for v in vals.split()] if vals else []
        state[name] = torch.tensor(data, dtype=getattr(torch, dtype)).reshape(shape)
    dtype = next(iter(state.values())).dtype
    policy = init_params(0, dims, manifest["role_tag"], dtype=dtype)
    policy.load_state_dict(state)
    for g in manifest["frozen"]:
        policy.freeze(g)
    return policy, manifest


def params_digest(policy: Policy) -> str:
    body = "".join(_format_array(k, v) for k, v in policy.state_dict().items())
    return hashlib.sha256(body.encode()).hexdigest()
