"""Training loop with frame-level (or constant) masking, and a gradient checker."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .corruption import (MaskSchedule, corrupt_tokens, fused_snr_weights,
                         masked_ce_loss_and_grad)

logger = logging.getLogger(__name__)


class MaskingMode(str, enum.Enum):
    FRAME = "frame"
    CONSTANT = "constant"


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    steps: int = 1000
    batch_size: int = 16
    k: int = 8
    mode: MaskingMode = MaskingMode.FRAME
    schedule: MaskSchedule = field(default_factory=MaskSchedule.linear)
    snr_decay: float = 0.9
    snr_clamp: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.mode = MaskingMode(self.mode)
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1 or self.k < 1:
            raise ValueError("batch size and k must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        out["schedule"] = {"kind": self.schedule.kind.value, "sharpness": self.schedule.sharpness}
        return out


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    windows: list[np.ndarray] = field(default_factory=list, repr=False)
    timesteps: list[np.ndarray] = field(default_factory=list, repr=False)

    def trailing(self, series: str, end: int, width: int = 200) -> float:
        vals = getattr(self, series)[max(0, end - width):end]
        return float(np.mean(vals)) if vals else float("nan")


def draw_timesteps(mode: MaskingMode, batch: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if mode is MaskingMode.FRAME:
        return rng.random((batch, k))
    return np.repeat(rng.random((batch, 1)), k, axis=1)


def sample_windows(videos, batch: int, k: int, rng: np.random.Generator):
    """Random ``k``-frame windows: returns ``(tokens (B, k, N), [(video, start)])``."""
    lengths = np.array([v.length for v in videos])
    if np.any(lengths < k):
        raise ValueError(f"every video needs at least k={k} frames")
    which = rng.integers(0, len(videos), size=batch)
    starts = rng.integers(0, lengths[which] - k + 1)
    tokens = np.stack([videos[w].frames[s:s + k] for w, s in zip(which, starts)])
    return tokens, np.stack([which, starts], axis=1)


def masked_accuracy(logits, target, corrupted, vocab) -> float:
    sel = corrupted == vocab.mask_id
    if not sel.any():
        return 1.0
    pred = vocab.data_ids[np.argmax(logits[..., vocab.data_ids], axis=-1)]
    return float((pred[sel] == target[sel]).mean())


def train(model, videos, cfg: TrainConfig, rng: np.random.Generator | None = None,
          record_draws: bool = False) -> TrainLog:
    """SGD on the fused-SNR-weighted masked cross-entropy.

    Window choice, timestep draws and corruption use independent child
    streams, so frame and constant modes see identical windows.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    window_rng, time_rng, mask_rng = rng.spawn(3)
    vocab = model.vocab
    log = TrainLog()
    for step in range(cfg.steps):
        clean, where = sample_windows(videos, cfg.batch_size, cfg.k, window_rng)
        t = draw_timesteps(cfg.mode, cfg.batch_size, cfg.k, time_rng)
        x_t = corrupt_tokens(clean, t, cfg.schedule, vocab, mask_rng)
        weights = fused_snr_weights(t, cfg.schedule, cfg.snr_decay, cfg.snr_clamp)
        logits, cache = model.forward(x_t, t)
        loss, _, dlogits = masked_ce_loss_and_grad(logits, clean, x_t, weights, vocab)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss {loss} at step {step} (lr={cfg.learning_rate}, "
                f"max |logit|={np.abs(logits).max():.3g})")
        model.apply_gradients(model.backward(cache, dlogits), cfg.learning_rate)
        log.losses.append(loss)
        log.accuracies.append(masked_accuracy(logits, clean, x_t, vocab))
        if record_draws:
            log.windows.append(where)
            log.timesteps.append(t)
        if step % 500 == 0:
            logger.debug("step %d loss %.4f acc %.3f", step, loss, log.accuracies[-1])
    return log


@dataclass
class GradientBatch:
    clean: np.ndarray
    corrupted: np.ndarray
    t: np.ndarray
    weights: np.ndarray


def make_gradient_batch(videos, vocab, k: int, batch: int, rng: np.random.Generator,
                        schedule: MaskSchedule | None = None) -> GradientBatch:
    schedule = schedule or MaskSchedule.linear()
    clean, _ = sample_windows(videos, batch, k, rng)
    t = rng.random((batch, k))
    x_t = corrupt_tokens(clean, t, schedule, vocab, rng)
    return GradientBatch(clean, x_t, t, fused_snr_weights(t, schedule).per_frame)


def gradient_check(model, batch: GradientBatch, delta: float = 1e-4, samples: int = 128,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy of ``model``. Coordinates with a non-zero analytic
    gradient are preferred so the check is not dominated by unused entries.
    """
    if not 1e-6 <= delta <= 1e-3:
        raise ValueError("delta must lie in [1e-6, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng
    probe = model.astype(np.float64)
    if probe.num_parameters() == 0:
        return 0.0
    vocab = probe.vocab

    def loss_and_grads():
        logits, cache = probe.forward(batch.corrupted, batch.t)
        loss, _, dlogits = masked_ce_loss_and_grad(logits, batch.clean, batch.corrupted,
                                                   batch.weights, vocab)
        return loss, probe.backward(cache, dlogits)

    _, grads = loss_and_grads()
    coords = []
    for name, g in grads.items():
        coords += [(name, idx) for idx in np.argwhere(g != 0)]
    rng.shuffle(coords)
    coords = coords[:samples]
    if len(coords) < samples:
        names = sorted(probe.params)
        sizes = np.array([probe.params[n].size for n in names])
        for _ in range(samples - len(coords)):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            flat = rng.integers(probe.params[name].size)
            coords.append((name, np.array(np.unravel_index(flat, probe.params[name].shape))))
    worst = 0.0
    for name, idx in coords:
        idx = tuple(int(i) for i in idx)
        param = probe.params[name]
        orig = param[idx]
        param[idx] = orig + delta
        up, _ = loss_and_grads()
        param[idx] = orig - delta
        down, _ = loss_and_grads()
        param[idx] = orig
        numeric = (up - down) / (2 * delta)
        analytic = grads[name][idx]
        denom = max(abs(numeric), abs(analytic))
        if denom > 1e-10:
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
