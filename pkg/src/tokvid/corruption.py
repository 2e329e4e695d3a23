"""Masking probability path, timestep sampling and the masked CE objective."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .types import Chunk, TimestepVector, Vocabulary

SNR_EPS = 1e-3


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    SIGMOID = "sigmoid"


class SnrDivergenceError(ArithmeticError):
    """SNR is unbounded at t = 1 (kappa = 1)."""


@dataclass(frozen=True)
class MaskSchedule:
    """kappa(t): probability that a token is unmasked at flow time t."""

    kind: ScheduleKind = ScheduleKind.LINEAR
    sharpness: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.kind is ScheduleKind.SIGMOID and not self.sharpness > 0:
            raise ValueError("sigmoid sharpness must be positive")

    def __call__(self, t):
        return kappa(t, self)

    @classmethod
    def linear(cls) -> MaskSchedule:
        return cls(ScheduleKind.LINEAR)

    @classmethod
    def sigmoid(cls, sharpness: float = 6.0) -> MaskSchedule:
        return cls(ScheduleKind.SIGMOID, sharpness)


def kappa(t, schedule: MaskSchedule):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if schedule.kind is ScheduleKind.LINEAR:
        out = t_arr.copy()
    else:
        a = schedule.sharpness
        lo, hi = expit(-a / 2.0), expit(a / 2.0)
        out = (expit(a * (t_arr - 0.5)) - lo) / (hi - lo)
        # pin endpoints exactly; rounding can leave 1 - 1e-16
        out = np.where(t_arr == 0.0, 0.0, np.where(t_arr == 1.0, 1.0, np.clip(out, 0.0, 1.0)))
    return float(out) if out.ndim == 0 else out


def sample_timestep_vector(k: int, context_count: int, rng: np.random.Generator) -> TimestepVector:
    """Context frames get t = 1, the rest independent U[0, 1)."""
    if not 0 <= context_count < k:
        raise ValueError(f"need 0 <= m < k, got m={context_count}, k={k}")
    vals = rng.random(k)
    vals[:context_count] = 1.0
    return TimestepVector(vals)


def _times(t, k: int) -> np.ndarray:
    vals = np.asarray(t.values if isinstance(t, TimestepVector) else t, dtype=np.float64)
    if vals.shape[-1] != k:
        raise ValueError(f"timestep vector has {vals.shape[-1]} entries, chunk has {k} frames")
    return vals


def corrupt_tokens(clean: np.ndarray, t, schedule: MaskSchedule, vocab: Vocabulary,
                   rng: np.random.Generator) -> np.ndarray:
    """Array form of :func:`corrupt`; ``clean`` is ``(..., k, N)``, ``t`` is ``(..., k)``."""
    clean = np.asarray(clean)
    keep_p = np.asarray(kappa(_times(t, clean.shape[-2]), schedule))
    keep = rng.random(clean.shape) < keep_p[..., None]
    return np.where(keep, clean, vocab.mask_id).astype(clean.dtype)


def corrupt(clean: Chunk, t, schedule: MaskSchedule, vocab: Vocabulary,
            rng: np.random.Generator) -> Chunk:
    if np.any(clean.frames == vocab.mask_id):
        raise ValueError("clean chunk already contains mask tokens")
    return Chunk(corrupt_tokens(clean.frames, t, schedule, vocab, rng), clean.context_count)


def constant_corrupt(clean: Chunk, t: float, schedule: MaskSchedule, vocab: Vocabulary,
                     rng: np.random.Generator) -> Chunk:
    return corrupt(clean, np.full(clean.length, float(t)), schedule, vocab, rng)


def snr(t, schedule: MaskSchedule):
    k = np.asarray(kappa(t, schedule))
    if np.any(k >= 1.0):
        raise SnrDivergenceError("SNR diverges at t = 1; clamp t below 1 first")
    out = k * k / (1.0 - k * k)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LossWeights:
    per_frame: np.ndarray
    decay: float


def fused_snr_weights(t, schedule: MaskSchedule, decay: float = 0.9, clamp_max: float = 5.0,
                      eps: float = SNR_EPS) -> LossWeights:
    """Exponentially fused per-frame SNR, clamped and scaled into (0, 1].

    Accepts a single vector or a ``(B, k)`` batch.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if not clamp_max > 0:
        raise ValueError("clamp_max must be positive")
    vals = np.asarray(t.values if isinstance(t, TimestepVector) else t, dtype=np.float64)
    per = np.asarray(snr(np.minimum(vals, 1.0 - eps), schedule), dtype=np.float64)
    fused = np.empty_like(per)
    acc = np.zeros(per.shape[:-1])
    for f in range(per.shape[-1]):
        acc = decay * acc + per[..., f]
        fused[..., f] = acc
    return LossWeights(np.minimum(fused, clamp_max) / clamp_max, decay)


def masked_ce_loss_and_grad(logits: np.ndarray, target: np.ndarray, corrupted: np.ndarray,
                            weights, vocab: Vocabulary):
    """Weighted CE over masked positions plus its gradient w.r.t. ``logits``.

    Shapes: logits ``(..., k, N, K)``; target/corrupted ``(..., k, N)``;
    weights ``(..., k)``. Normalized by the masked-token count (min 1).
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    corrupted = np.asarray(corrupted)
    w = np.asarray(weights.per_frame if isinstance(weights, LossWeights) else weights,
                   dtype=np.float64)
    if logits.shape[:-1] != target.shape or target.shape != corrupted.shape:
        raise ValueError("logits, target and corrupted shapes disagree")
    if logits.shape[-1] != vocab.size:
        raise ValueError(f"logits last axis {logits.shape[-1]} != vocabulary size {vocab.size}")
    selector = corrupted == vocab.mask_id
    count = int(selector.sum())
    if count == 0:
        return 0.0, selector, np.zeros_like(logits)
    tok_w = np.broadcast_to(w[..., None], target.shape) * selector
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp, target[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = float(-(tok_w * picked).sum() / count)
    grad = softmax(logits, axis=-1)
    np.put_along_axis(grad, target[..., None].astype(np.intp),
                      np.take_along_axis(grad, target[..., None].astype(np.intp), axis=-1) - 1.0,
                      axis=-1)
    grad *= (tok_w / count)[..., None]
    return loss, selector, grad


def masked_ce_loss(logits, target: Chunk, corrupted: Chunk, weights, vocab: Vocabulary):
    tgt = target.frames if isinstance(target, Chunk) else target
    cor = corrupted.frames if isinstance(corrupted, Chunk) else corrupted
    loss, selector, _ = masked_ce_loss_and_grad(logits, tgt, cor, weights, vocab)
    return loss, selector
