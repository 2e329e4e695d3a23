"""Synthetic token-video processes with exactly computable conditionals.

Every token column evolves as an independent Markov chain over the data ids:
apply a fixed bijection (cyclic shift or a seeded permutation), then with
probability ``noise`` resample uniformly. That keeps posteriors tractable by
enumeration on small chunks and by forward-backward on long ones.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .types import TOKEN_DTYPE, TokenVideo, Vocabulary

ENUMERATION_BUDGET = 10**7
_BLOCK = 1 << 15


class CapacityError(RuntimeError):
    """Completion space too large to enumerate."""


class Dynamics(str, enum.Enum):
    CYCLIC_SHIFT = "cyclic_shift"
    PERMUTATION_WALK = "permutation_walk"


@dataclass(frozen=True)
class SyntheticProcess:
    num_data: int = 3
    tokens_per_frame: int = 2
    dynamics: Dynamics = Dynamics.CYCLIC_SHIFT
    noise: float = 0.0
    perm_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dynamics", Dynamics(self.dynamics))
        if self.num_data < 1:
            raise ValueError("need at least one data id")
        if self.tokens_per_frame < 1:
            raise ValueError("need at least one token per frame")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.num_data + 1, self.num_data)

    @property
    def successor(self) -> np.ndarray:
        ids = np.arange(self.num_data)
        if self.dynamics is Dynamics.CYCLIC_SHIFT:
            return (ids + 1) % self.num_data
        return np.random.default_rng(self.perm_seed).permutation(self.num_data)

    @property
    def transition(self) -> np.ndarray:
        d = self.num_data
        P = np.full((d, d), self.noise / d)
        P[np.arange(d), self.successor] += 1.0 - self.noise
        return P

    @property
    def initial(self) -> np.ndarray:
        return np.full(self.num_data, 1.0 / self.num_data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dynamics"] = self.dynamics.value
        return out


def gen_video(process: SyntheticProcess, length: int, rng: np.random.Generator) -> TokenVideo:
    if length < 1:
        raise ValueError("video length must be >= 1")
    d, n = process.num_data, process.tokens_per_frame
    succ = process.successor
    frames = np.empty((length, n), dtype=np.int64)
    frames[0] = rng.integers(0, d, size=n)
    for f in range(1, length):
        nxt = succ[frames[f - 1]]
        resample = rng.random(n) < process.noise
        frames[f] = np.where(resample, rng.integers(0, d, size=n), nxt)
    return TokenVideo(frames.astype(TOKEN_DTYPE), process.vocab)


def log_joint(process: SyntheticProcess, chunks: np.ndarray) -> np.ndarray:
    """Log-probability of fully observed ``(..., k, N)`` chunks."""
    chunks = np.asarray(chunks, dtype=np.intp)
    with np.errstate(divide="ignore"):
        logP = np.log(process.transition)
    lp = np.full(chunks.shape[:-2], chunks.shape[-1] * math.log(1.0 / process.num_data))
    if chunks.shape[-2] > 1:
        lp = lp + logP[chunks[..., :-1, :], chunks[..., 1:, :]].sum(axis=(-2, -1))
    return lp


@dataclass
class CompletionDistribution:
    """Exact law of the masked tokens of one chunk given its visible tokens."""

    observed: np.ndarray
    positions: np.ndarray
    assignments: np.ndarray
    probs: np.ndarray
    num_data: int = field(repr=False, default=0)

    def marginals(self) -> np.ndarray:
        """``(M, D)`` per-masked-position marginal distributions."""
        out = np.zeros((self.positions.shape[0], self.num_data))
        for j in range(self.positions.shape[0]):
            np.add.at(out[j], self.assignments[:, j], self.probs)
        return out

    def as_dict(self) -> dict[tuple, float]:
        return {tuple(int(v) for v in a): float(p) for a, p in zip(self.assignments, self.probs)}


def exact_chunk_conditional(process: SyntheticProcess, observed: np.ndarray,
                            budget: int = ENUMERATION_BUDGET,
                            reverse: bool = False) -> CompletionDistribution:
    """Enumerate every assignment of the masked tokens and weigh it by the joint.

    ``reverse`` walks the completion space in the opposite order; the returned
    table is always in lexicographic order so both walks compare exactly.
    """
    observed = np.asarray(observed, dtype=np.intp)
    mask_id = process.vocab.mask_id
    positions = np.argwhere(observed == mask_id)
    d, m = process.num_data, positions.shape[0]
    total = d**m
    if total > budget:
        raise CapacityError(f"{d}^{m} = {total} completions exceed budget {budget}")
    if m and np.any(observed[observed != mask_id] >= d):
        raise ValueError("observed token outside data ids")
    logw = np.empty(total)
    assignments = np.empty((total, m), dtype=np.intp)
    order = range(total - 1, -1, -1) if reverse else range(total)
    rows, cols = positions[:, 0], positions[:, 1]
    it = iter(order)
    while True:
        idx = np.fromiter(itertools.islice(it, _BLOCK), dtype=np.intp)
        if idx.size == 0:
            break
        digits = (idx[:, None] // d ** np.arange(m - 1, -1, -1)[None, :]) % d if m else \
            np.zeros((idx.size, 0), dtype=np.intp)
        filled = np.broadcast_to(observed, (idx.size,) + observed.shape).copy()
        filled[:, rows, cols] = digits
        logw[idx] = log_joint(process, filled)
        assignments[idx] = digits
    if not np.isfinite(logw.max()):
        raise ValueError("observation has zero probability under the process")
    weights = np.exp(logw - logw.max())
    z = math.fsum(weights.tolist())
    return CompletionDistribution(observed, positions, assignments, weights / z, d)


def chain_posteriors(process: SyntheticProcess, observed: np.ndarray) -> np.ndarray:
    """Per-position posteriors ``(k, N, D)`` via forward-backward on each column."""
    observed = np.asarray(observed, dtype=np.intp)
    k, n = observed.shape
    d = process.num_data
    P = process.transition
    visible = observed != process.vocab.mask_id
    lik = np.ones((k, n, d))
    vf, vn = np.nonzero(visible)
    lik[vf, vn, :] = 0.0
    lik[vf, vn, observed[vf, vn]] = 1.0
    alpha = np.empty((k, n, d))
    a = process.initial[None, :] * lik[0]
    alpha[0] = a / a.sum(axis=-1, keepdims=True)
    for f in range(1, k):
        a = (alpha[f - 1] @ P) * lik[f]
        alpha[f] = a / a.sum(axis=-1, keepdims=True)
    beta = np.ones((k, n, d))
    for f in range(k - 2, -1, -1):
        b = (beta[f + 1] * lik[f + 1]) @ P.T
        beta[f] = b / b.sum(axis=-1, keepdims=True)
    post = alpha * beta
    return post / post.sum(axis=-1, keepdims=True)


def tv_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(key, 0.0) - q.get(key, 0.0)) for key in keys)


def empirical_distribution(samples) -> dict[tuple, float]:
    counts: dict[tuple, int] = {}
    for s in samples:
        key = tuple(int(v) for v in np.asarray(s).reshape(-1))
        counts[key] = counts.get(key, 0) + 1
    total = sum(counts.values())
    return {key: c / total for key, c in counts.items()}


def sampler_tv_distance(samples, observed: np.ndarray, process: SyntheticProcess) -> float:
    """TV between sampled completions of ``observed`` and the exact conditional.

    ``samples`` are full chunks; only the masked positions of ``observed``
    are compared.
    """
    exact = exact_chunk_conditional(process, observed)
    rows, cols = exact.positions[:, 0], exact.positions[:, 1]
    picked = [np.asarray(s)[rows, cols] for s in samples]
    return tv_distance(empirical_distribution(picked), exact.as_dict())


@dataclass
class EvalReport:
    token_accuracy: float
    chunk_accuracy: list[float]
    tv_distance: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_rows(self) -> list[list]:
        rows = [["token_accuracy", "", self.token_accuracy]]
        rows += [["chunk_accuracy", i, acc] for i, acc in enumerate(self.chunk_accuracy)]
        if self.tv_distance is not None:
            rows.append(["tv_distance", "", self.tv_distance])
        return rows


def evaluate_rollout(generated: TokenVideo, truth: TokenVideo, spans=None,
                     context_frames: int = 0, tv: float | None = None) -> EvalReport:
    """Token accuracy of a rollout against a ground-truth continuation.

    ``spans`` are the ``(start, stop)`` frame ranges produced by each chunk;
    without them the whole generated region counts as one chunk.
    """
    gen, ref = generated.frames, truth.frames
    if gen.shape != ref.shape:
        raise ValueError(f"generated {gen.shape} and truth {ref.shape} differ in shape")
    region = gen[context_frames:] == ref[context_frames:]
    acc = float(region.mean()) if region.size else 1.0
    if spans is None:
        spans = [(context_frames, gen.shape[0])]
    curve = [float((gen[a:b] == ref[a:b]).mean()) for a, b in spans]
    return EvalReport(acc, curve, tv)
