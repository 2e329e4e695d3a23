"""Chunkwise autoregressive generation of videos longer than the model window."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .samplers import SamplerConfig, SamplerMode, rolling_sample_video, sample_chunk
from .types import TokenVideo, Vocabulary


class PlanError(ValueError):
    """Chunk geometry cannot produce the requested video."""


class RolloutError(RuntimeError):
    def __init__(self, chunk_index: int, cause: Exception):
        super().__init__(f"chunk {chunk_index}: {cause}")
        self.chunk_index = chunk_index


@dataclass(frozen=True)
class ChunkStep:
    context_start: int
    m: int
    h: int

    @property
    def chunk_length(self) -> int:
        return self.m + self.h

    @property
    def new_frames(self) -> tuple[int, int]:
        start = self.context_start + self.m
        return start, start + self.h


@dataclass(frozen=True)
class ChunkPlan:
    steps: tuple[ChunkStep, ...]
    length: int
    k: int
    s: int
    initial_context: int

    def __len__(self):
        return len(self.steps)

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [st.new_frames for st in self.steps]


def plan_chunks(L: int, k: int, m: int, s: int) -> ChunkPlan:
    """Trace the chunk loop: each chunk adds min(R, s) frames, the last one
    widening its context to ``k - R`` so nothing is generated past ``L``."""
    if m < 1:
        raise PlanError("need at least one context frame")
    if m >= k:
        raise PlanError(f"context m={m} leaves no room in chunk k={k}")
    if L <= m:
        raise PlanError(f"video length {L} must exceed the {m} context frames")
    if not 1 <= s <= k - m:
        raise PlanError(f"stride {s} outside [1, k - m = {k - m}]")
    steps = []
    c, ctx = m, m
    while c < L:
        remaining = L - c
        h = min(remaining, s)
        if remaining <= s:
            ctx = k - remaining
        # the widened final context cannot reach back before frame 0
        ctx_used = min(ctx, c)
        steps.append(ChunkStep(c - ctx_used, ctx_used, h))
        c += h
    return ChunkPlan(tuple(steps), L, k, s, m)


def autoregressive_mode(k: int) -> tuple[int, int]:
    """(m, s) for frame-by-frame generation."""
    if k < 2:
        raise PlanError("autoregressive mode needs k >= 2")
    return k - 1, 1


def full_sequence_mode(k: int, m: int) -> tuple[int, int]:
    if not 1 <= m < k:
        raise PlanError("need 1 <= m < k")
    return m, k - m


@dataclass
class RolloutResult:
    video: TokenVideo
    plan: ChunkPlan
    contexts: list[np.ndarray] = field(default_factory=list, repr=False)


def rollout_video(model, cfg: SamplerConfig, context, L: int, k: int, s: int,
                  vocab: Vocabulary, rng: np.random.Generator) -> RolloutResult:
    """Generate ``L`` frames continuing ``context`` chunk by chunk.

    Rolling mode has its own sliding-window schedule and ignores ``s``.
    """
    context = np.asarray(context)
    m = context.shape[0]
    plan = plan_chunks(L, k, m, s)
    if cfg.mode is SamplerMode.ROLLING:
        frames = rolling_sample_video(model, context, L, k, cfg, vocab, rng)
        return RolloutResult(TokenVideo(frames, vocab), plan)
    produced = context.copy()
    contexts = []
    extra = {"schedule_k": k} if cfg.mode is SamplerMode.DF else {}
    for idx, st in enumerate(plan.steps):
        ctx = produced[st.context_start:st.context_start + st.m]
        contexts.append(ctx.copy())
        try:
            chunk = sample_chunk(model, ctx, st.chunk_length, cfg, vocab, rng, **extra)
        except Exception as exc:
            raise RolloutError(idx, exc) from exc
        new = chunk[st.m:st.m + st.h]
        produced = np.concatenate([produced, new], axis=0)
    return RolloutResult(TokenVideo(produced, vocab), plan, contexts)
