"""Single-chunk samplers and the two baseline schedules.

Samplers take a context of shape ``(m, N)`` or a batch ``(B, m, N)`` of
independent chains and return the same rank. Each step is one batched
forward pass (three with partial-context guidance). Generated chunks never
contain the mask id.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import softmax

from .corruption import MaskSchedule, corrupt_tokens
from .predictors import batch_predict
from .types import TOKEN_DTYPE, Vocabulary


class SamplerMode(str, enum.Enum):
    FM = "fm"
    MGM = "mgm"
    DF = "df"
    ROLLING = "rolling"


DEFAULT_STEPS = {SamplerMode.FM: 250, SamplerMode.MGM: 20, SamplerMode.DF: 250,
                 SamplerMode.ROLLING: 250}


@dataclass(frozen=True)
class SamplerConfig:
    mode: SamplerMode = SamplerMode.MGM
    steps: int | None = None
    timestep_independent: bool = False
    guidance_scale: float = 0.0
    partial_ratio: float = 0.5
    argmax: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", SamplerMode(self.mode))
        if self.steps is None:
            object.__setattr__(self, "steps", DEFAULT_STEPS[self.mode])
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")
        if not 0.0 < self.partial_ratio < 1.0:
            raise ValueError("partial ratio must lie in (0, 1)")
        if self.mode is SamplerMode.FM and self.timestep_independent:
            raise ValueError("FM-style sampling needs timestep conditioning")

    @property
    def guided(self) -> bool:
        return self.guidance_scale > 0

    def with_mode(self, mode) -> SamplerConfig:
        return replace(self, mode=SamplerMode(mode), steps=None)


def guided_logits(z_cond, z_partial, z_uncond, omega: float) -> np.ndarray:
    z_cond, z_partial, z_uncond = (np.asarray(z, dtype=np.float64)
                                   for z in (z_cond, z_partial, z_uncond))
    if not z_cond.shape == z_partial.shape == z_uncond.shape:
        raise ValueError(
            f"logit shapes differ: {z_cond.shape}, {z_partial.shape}, {z_uncond.shape}")
    if omega == 0:
        return z_cond.copy()
    return z_cond + omega * (z_partial - z_uncond)


def confidence_select(confidences, count: int) -> list:
    """Positions of the ``count`` largest confidences.

    ``confidences`` is a sequence of ``(position, C)`` pairs; ties go to the
    smallest position.
    """
    items = list(confidences)
    if not 0 <= count <= len(items):
        raise ValueError(f"cannot select {count} of {len(items)} positions")
    ranked = sorted(items, key=lambda pc: (-pc[1], pc[0]))
    return sorted(p for p, _ in ranked[:count])


def _top_indices(conf: np.ndarray, count: int) -> np.ndarray:
    """Vectorized ``confidence_select`` over flat indices (ties -> lowest)."""
    order = np.argsort(-conf, kind="stable")
    return np.sort(order[:count])


def _select_top(conf: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-row boolean mask of the ``counts[b]`` largest entries of ``conf[b]``.

    Non-candidates must carry ``-inf``; ties go to the lowest column.
    """
    order = np.argsort(-conf, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(conf.shape[1])[None, :], axis=1)
    return ranks < np.asarray(counts)[:, None]


def _batched(context):
    context = np.asarray(context)
    if context.ndim == 2:
        return context[None], True
    if context.ndim == 3:
        return context, False
    raise ValueError("context must be (m, N) or (B, m, N)")


def _check_context(context: np.ndarray, k: int, vocab: Vocabulary) -> np.ndarray:
    if context.shape[1] >= k:
        raise ValueError(f"context of {context.shape[1]} frames leaves nothing to generate in k={k}")
    if np.any(context == vocab.mask_id):
        raise ValueError("context frames must not contain mask tokens")
    return context


def _init_chunk(context: np.ndarray, k: int, vocab: Vocabulary) -> np.ndarray:
    B, m, n = context.shape
    x = np.full((B, k, n), vocab.mask_id, dtype=TOKEN_DTYPE)
    x[:, :m] = context
    return x


def unmasked_fraction(x: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    return (x != vocab.mask_id).mean(axis=-1)


def model_logits(model, x, t, m: int, cfg: SamplerConfig, vocab: Vocabulary,
                 rng: np.random.Generator) -> np.ndarray:
    """One sampling step's logits for a ``(B, k, N)`` batch, fusing three
    passes when guidance is on."""
    t = np.asarray(t, dtype=np.float64)
    if cfg.timestep_independent:
        t = np.zeros_like(t)
    z_cond = batch_predict(model, x, t)
    if not cfg.guided:
        return z_cond
    x_uncond = x.copy()
    x_uncond[:, :m] = vocab.mask_id
    t_uncond = t.copy()
    t_uncond[:, :m] = 0.0
    keep = 1.0 - cfg.partial_ratio
    x_partial = x.copy()
    x_partial[:, :m] = corrupt_tokens(x[:, :m], np.full(m, keep), MaskSchedule.linear(),
                                      vocab, rng)
    t_partial = t.copy()
    if not cfg.timestep_independent:
        t_partial[:, :m] = keep
    z_partial = batch_predict(model, x_partial, t_partial)
    z_uncond = batch_predict(model, x_uncond, t_uncond)
    return guided_logits(z_cond, z_partial, z_uncond, cfg.guidance_scale)


def data_probs(logits: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Softmax restricted to data ids, renormalized without the mask id."""
    return softmax(logits[..., vocab.data_ids], axis=-1)


def draw(probs: np.ndarray, rng: np.random.Generator, argmax: bool = False) -> np.ndarray:
    """Index of one categorical draw per distribution along the last axis."""
    if argmax:
        return probs.argmax(axis=-1)
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _candidates(logits, x, vocab, rng, argmax):
    """Sampled ids and confidences at every position; ``-inf`` confidence
    where the token is already visible. Shapes ``(B, k, N)``."""
    probs = data_probs(logits, vocab)
    pick = draw(probs, rng, argmax)
    conf = np.take_along_axis(probs, pick[..., None], axis=-1)[..., 0]
    conf = np.where(x == vocab.mask_id, conf, -np.inf)
    return vocab.data_ids[pick].astype(TOKEN_DTYPE), conf


def fm_unmask_probability(t: float, dt: float) -> float:
    if t >= 1.0:
        return 1.0
    return min(1.0, dt * t / (1.0 - t))


def fm_sample_chunk(model, context, k: int, cfg: SamplerConfig, vocab: Vocabulary,
                    rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Euler traversal of the masking flow with velocity t/(1-t)(p - delta).

    Each step a masked token jumps with probability dt*t/(1-t) to a draw from
    the model's clean-token distribution; visible tokens never change.
    Tokens still masked after the last step are drawn from its prediction.
    """
    ctx, single = _batched(context)
    ctx = _check_context(ctx, k, vocab)
    m, T = ctx.shape[1], cfg.steps
    x = _init_chunk(ctx, k, vocab)
    tvec = np.zeros((x.shape[0], k))
    tvec[:, :m] = 1.0
    dt = 1.0 / T
    logits = None
    for i in range(T):
        t = i * dt
        logits = model_logits(model, x, tvec, m, cfg, vocab, rng)
        masked = x == vocab.mask_id
        jump = masked & (rng.random(x.shape) < fm_unmask_probability(t, dt))
        if jump.any():
            probs = data_probs(logits[jump], vocab)
            x[jump] = vocab.data_ids[draw(probs, rng, cfg.argmax)]
        tvec[:, m:] = np.minimum(1.0, tvec[:, m:] + dt)
        if trace is not None:
            trace.append(x.copy())
    residual = x == vocab.mask_id
    if residual.any():
        probs = data_probs(logits[residual], vocab)
        x[residual] = vocab.data_ids[draw(probs, rng, cfg.argmax)]
        if trace is not None:
            trace.append(x.copy())
    return x[0] if single else x


def mgm_sample_chunk(model, context, k: int, cfg: SamplerConfig, vocab: Vocabulary,
                     rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Confidence-ranked parallel decoding.

    Step ``i`` samples a candidate for every masked token and commits the
    ceil(|M| / (T - i + 1)) most confident ones, so the chunk is complete
    after at most ``T`` passes.
    """
    ctx, single = _batched(context)
    ctx = _check_context(ctx, k, vocab)
    m, T = ctx.shape[1], cfg.steps
    x = _init_chunk(ctx, k, vocab)
    B = x.shape[0]
    for i in range(1, T + 1):
        tvec = unmasked_fraction(x, vocab)
        tvec[:, :m] = 1.0
        logits = model_logits(model, x, tvec, m, cfg, vocab, rng)
        cand, conf = _candidates(logits, x, vocab, rng, cfg.argmax)
        remaining = (x == vocab.mask_id).reshape(B, -1).sum(axis=1)
        counts = -(-remaining // (T - i + 1))
        commit = _select_top(conf.reshape(B, -1), counts).reshape(x.shape)
        x[commit] = cand[commit]
        if trace is not None:
            trace.append(x.copy())
        if not np.any(x == vocab.mask_id):
            break
    return x[0] if single else x


def guided_sample_chunk(model, context, k: int, cfg: SamplerConfig, vocab: Vocabulary,
                        rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """MGM sampling with partial-context guidance; plain MGM when the scale is 0."""
    return mgm_sample_chunk(model, context, k, cfg, vocab, rng, trace)


def pyramid_schedule_matrix(k: int, T: int) -> np.ndarray:
    """``(k + T, k)`` matrix of per-frame noise-step indices, clipped to [0, T-1]."""
    if k < 1 or T < 1:
        raise ValueError("need k >= 1 and T >= 1")
    i = np.arange(k + T)[:, None]
    j = np.arange(k)[None, :]
    return np.clip(T + j - i, 0, T - 1)


def _masked_target(level: np.ndarray, n: int) -> np.ndarray:
    """Masked-token count realizing a per-frame mask ratio."""
    return np.floor(n * np.asarray(level) + 1e-9).astype(np.int64)


def _unmask_to_targets(x, logits, targets, first: int, vocab, rng, argmax):
    """Per frame, commit the most confident candidates until at most
    ``targets[f]`` tokens stay masked. Frames before ``first`` are skipped."""
    cand, conf = _candidates(logits, x, vocab, rng, argmax)
    masked = x == vocab.mask_id
    for f in range(first, x.shape[1]):
        excess = masked[:, f].sum(axis=1) - int(targets[f])
        if np.any(excess > 0):
            commit = _select_top(conf[:, f], np.maximum(excess, 0))
            x[:, f][commit] = cand[:, f][commit]


def df_pyramid_sample_chunk(model, context, k: int, cfg: SamplerConfig, vocab: Vocabulary,
                            rng: np.random.Generator, trace: list | None = None,
                            schedule_k: int | None = None) -> np.ndarray:
    """Walk the pyramid matrix row by row, one forward pass per row.

    Row entries are read as per-frame mask ratios ``entry / (T - 1)``.
    ``schedule_k`` sets the matrix width (defaults to ``k``); a rollout
    passes the training window so every chunk costs ``window + T`` passes.
    """
    ctx, single = _batched(context)
    ctx = _check_context(ctx, k, vocab)
    m, T = ctx.shape[1], cfg.steps
    width = k if schedule_k is None else schedule_k
    if width < k:
        raise ValueError("schedule width smaller than chunk")
    matrix = pyramid_schedule_matrix(width, T)
    x = _init_chunk(ctx, k, vocab)
    n = x.shape[2]
    for row in matrix:
        level = row[:k] / (T - 1) if T > 1 else np.zeros(k)
        tvec = unmasked_fraction(x, vocab)
        tvec[:, :m] = 1.0
        logits = model_logits(model, x, tvec, m, cfg, vocab, rng)
        _unmask_to_targets(x, logits, _masked_target(level, n), m, vocab, rng, cfg.argmax)
        if trace is not None:
            trace.append(x.copy())
    return x[0] if single else x


def rolling_ramp(k: int, m: int) -> np.ndarray:
    """Mask ratios of the rolling state: 0 on context, then (j-m+1)/(k-m)."""
    ramp = np.zeros(k)
    ramp[m:] = (np.arange(m, k) - m + 1) / (k - m)
    return ramp


def rolling_sample_video(model, context, L: int, k: int, cfg: SamplerConfig,
                         vocab: Vocabulary, rng: np.random.Generator,
                         trace: list | None = None) -> np.ndarray:
    """Sliding-window sampling with a linear per-position masking ramp.

    Stage 1 ramps the first window to the rolling state in T passes; each of
    the ``L - k`` shifts spends ceil(T / (k - m)) passes clearing the first
    generated frame; stage 3 clears the last window in T passes.
    """
    ctx, single = _batched(context)
    ctx = _check_context(ctx, k, vocab)
    if L < k:
        raise ValueError(f"video length {L} shorter than window {k}")
    B, m, n = ctx.shape
    T = cfg.steps
    ramp = rolling_ramp(k, m)
    window = _init_chunk(ctx, k, vocab)
    out = [ctx.copy()]

    def step(levels):
        tvec = unmasked_fraction(window, vocab)
        tvec[:, :m] = 1.0
        logits = model_logits(model, window, tvec, m, cfg, vocab, rng)
        _unmask_to_targets(window, logits, _masked_target(levels, n), m, vocab, rng, cfg.argmax)
        if trace is not None:
            trace.append(window.copy())

    for p in range(1, T + 1):
        step(1.0 - (p / T) * (1.0 - ramp))
    passes = math.ceil(T / (k - m))
    per_pass = (1.0 / (k - m)) / passes
    for _ in range(L - k):
        for p in range(1, passes + 1):
            levels = np.maximum(ramp - p * per_pass, 0.0)
            if p == passes:
                levels[m] = 0.0
            step(levels)
        out.append(window[:, m:m + 1].copy())
        window = np.concatenate(
            [window[:, 1:], np.full((B, 1, n), vocab.mask_id, dtype=TOKEN_DTYPE)], axis=1)
    for p in range(1, T + 1):
        step(ramp * (1.0 - p / T))
    out.append(window[:, m:].copy())
    frames = np.concatenate(out, axis=1)
    return frames[0] if single else frames


CHUNK_SAMPLERS = {
    SamplerMode.FM: fm_sample_chunk,
    SamplerMode.MGM: mgm_sample_chunk,
    SamplerMode.DF: df_pyramid_sample_chunk,
}


def sample_chunk(model, context, k: int, cfg: SamplerConfig, vocab: Vocabulary,
                 rng: np.random.Generator, **kwargs) -> np.ndarray:
    try:
        fn = CHUNK_SAMPLERS[cfg.mode]
    except KeyError:
        raise ValueError(f"{cfg.mode.value} is a whole-video sampler, not a chunk sampler") from None
    return fn(model, context, k, cfg, vocab, rng, **kwargs)
