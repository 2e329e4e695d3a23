"""Clean-token predictors: the interface, an exact oracle and two trainable models.

Every predictor maps a partially masked chunk ``x`` of shape ``(k, N)`` and a
timestep vector ``t`` of shape ``(k,)`` to logits of shape ``(k, N, K)`` over
the full vocabulary (mask id included). Visible positions always receive a
large-margin one-hot on their observed id; only masked positions carry a
learned or inferred distribution.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .synthetic import SyntheticProcess, chain_posteriors, exact_chunk_conditional
from .types import Vocabulary

# exp(-1e4) underflows to exactly 0.0, so softmax reproduces hard zeros.
LOGIT_FLOOR = -1.0e4
_CKPT_MAGIC = b"TVCK"


@runtime_checkable
class Predictor(Protocol):
    vocab: Vocabulary

    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...


def _pin_visible(logits: np.ndarray, x: np.ndarray, mask_id: int) -> np.ndarray:
    """Overwrite visible positions with a one-hot on the observed id."""
    visible = x != mask_id
    if visible.any():
        onehot = np.full(logits.shape[-1], LOGIT_FLOOR)
        rows = logits[visible]
        rows[:] = onehot
        rows[np.arange(rows.shape[0]), x[visible].astype(np.intp)] = 0.0
        logits[visible] = rows
    return logits


def batch_predict(model, x, t):
    """Forward a ``(B, k, N)`` batch; loops for predictors without batch support."""
    if getattr(model, "batched", False):
        return model.predict(x, t)
    return np.stack([model.predict(xb, tb) for xb, tb in zip(x, t)])


class CountingPredictor:
    """Wraps a predictor and counts forward passes.

    A batched call counts once: every chain in the batch advances by one pass.
    """

    batched = True

    def __init__(self, inner):
        self.inner = inner
        self.vocab = inner.vocab
        self.count = 0

    def predict(self, x, t):
        self.count += 1
        x = np.asarray(x)
        if x.ndim == 2:
            return self.inner.predict(x, t)
        return batch_predict(self.inner, x, t)

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


class OraclePredictor:
    """Exact Bayes posterior of the synthetic process; ignores ``t``.

    ``method="chain"`` runs forward-backward per token column; ``"enumerate"``
    marginalizes a full enumeration of the masked completions.
    """

    def __init__(self, process: SyntheticProcess, method: str = "chain"):
        if method not in ("chain", "enumerate"):
            raise ValueError(f"unknown oracle method {method!r}")
        self.process = process
        self.vocab = process.vocab
        self.method = method

    batched = True

    def predict(self, x, t=None):
        x = np.asarray(x)
        d, mask_id = self.process.num_data, self.vocab.mask_id
        logits = np.full(x.shape + (self.vocab.size,), LOGIT_FLOOR)
        masked = x == mask_id
        if masked.any():
            if self.method == "enumerate":
                rows = x.reshape((-1,) + x.shape[-2:])
                post = np.concatenate([exact_chunk_conditional(self.process, r).marginals()
                                       for r in rows])
            elif x.ndim == 2:
                post = chain_posteriors(self.process, x)[masked]
            else:
                # columns are independent chains: fold the batch into the token axis
                cols = np.moveaxis(x, -2, 0).reshape(x.shape[-2], -1)
                full = chain_posteriors(self.process, cols).reshape(
                    (x.shape[-2],) + x.shape[:-2] + (x.shape[-1], d))
                post = np.moveaxis(full, 0, -3)[masked]
            with np.errstate(divide="ignore"):
                logp = np.maximum(np.log(post), LOGIT_FLOOR)
            data_cols = self.vocab.data_ids
            block = np.full((post.shape[0], self.vocab.size), LOGIT_FLOOR)
            block[:, data_cols] = logp[:, :d]
            logits[masked] = block
        return _pin_visible(logits, x, mask_id)


class UniformPredictor:
    """Constant logits over data ids; costs nothing, used to count passes."""

    batched = True

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def predict(self, x, t=None):
        x = np.asarray(x)
        logits = np.zeros(x.shape + (self.vocab.size,))
        logits[..., self.vocab.mask_id] = LOGIT_FLOOR
        return _pin_visible(logits, x, self.vocab.mask_id)


def oracle_predict(x, process: SyntheticProcess, method: str = "chain") -> np.ndarray:
    return OraclePredictor(process, method).predict(x)


class TrainablePredictor:
    """Shared plumbing for models with explicit parameters and manual backprop."""

    kind = "base"

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.params: dict[str, np.ndarray] = {}

    # subclasses implement forward(x, t) -> (logits, cache) and backward(cache, dlogits)

    batched = True

    def predict(self, x, t):
        x = np.asarray(x)
        t = np.asarray(t, dtype=np.float64)
        if x.ndim == 2:
            return self.forward(x[None], t[None])[0][0]
        return self.forward(x, t)[0]

    def apply_gradients(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            self.params[name] -= (lr * g).astype(self.params[name].dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        clone = self.copy()
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def config(self) -> dict:
        return {}

    # -- checkpoints ---------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        names = sorted(self.params)
        header = {
            "kind": self.kind,
            "vocab": {"K": self.vocab.size, "mask_id": self.vocab.mask_id},
            "config": self.config(),
            "params": [[name, list(self.params[name].shape)] for name in names],
            "extra": extra or {},
        }
        head = json.dumps(header, sort_keys=True).encode()
        body = b"".join(self.params[name].astype("<f4").tobytes() for name in names)
        Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<I", len(head)) + head + body)


def read_checkpoint_header(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    (size,) = struct.unpack_from("<I", blob, 4)
    return json.loads(blob[8:8 + size])


def load_checkpoint(path: str | Path) -> TrainablePredictor:
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (size,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + size])
    vocab = Vocabulary(header["vocab"]["K"], header["vocab"]["mask_id"])
    cls = {"tabular": TabularPredictor, "mlp": MLPPredictor}[header["kind"]]
    model = cls(vocab, **header["config"])
    offset = 8 + size
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        model.params[name] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in parameter block")
    return model


def nearest_anchors(x: np.ndarray, mask_id: int):
    """Closest visible token before/after each position within its column.

    Returns ``(prev_tok, prev_dist, next_tok, next_dist)`` with ``-1``
    tokens and ``0`` distances where no anchor exists. Shapes ``(B, k, N)``.
    """
    B, k, n = x.shape
    visible = x != mask_id
    prev_tok = np.full((B, k, n), -1, dtype=np.int64)
    prev_dist = np.zeros((B, k, n), dtype=np.int64)
    next_tok = np.full((B, k, n), -1, dtype=np.int64)
    next_dist = np.zeros((B, k, n), dtype=np.int64)
    tok = np.full((B, n), -1, dtype=np.int64)
    last = np.zeros((B, n), dtype=np.int64)
    for f in range(k):
        prev_tok[:, f] = tok
        prev_dist[:, f] = np.where(tok >= 0, f - last, 0)
        tok = np.where(visible[:, f], x[:, f], tok)
        last = np.where(visible[:, f], f, last)
    tok[:] = -1
    for f in range(k - 1, -1, -1):
        next_tok[:, f] = tok
        next_dist[:, f] = np.where(tok >= 0, last - f, 0)
        tok = np.where(visible[:, f], x[:, f], tok)
        last = np.where(visible[:, f], f, last)
    return prev_tok, prev_dist, next_tok, next_dist


class TabularPredictor(TrainablePredictor):
    """Lookup table keyed by the nearest visible token in the same column.

    A key is (direction, anchor id, distance): the previous visible token
    wins over the following one; distances saturate at ``max_dist``. One
    extra key covers columns with nothing visible. Timestep-independent.
    """

    kind = "tabular"

    def __init__(self, vocab: Vocabulary, max_dist: int = 8, init_scale: float = 0.0,
                 seed: int = 0):
        super().__init__(vocab)
        self.max_dist = int(max_dist)
        self.init_scale = float(init_scale)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.params["table"] = (init_scale * rng.standard_normal((self.num_keys, vocab.size))
                                ).astype(np.float32)

    @property
    def num_keys(self) -> int:
        return 2 * self.vocab.size * self.max_dist + 1

    def config(self) -> dict:
        return {"max_dist": self.max_dist, "init_scale": self.init_scale, "seed": self.seed}

    def keys(self, x: np.ndarray) -> np.ndarray:
        pt, pd, nt, nd = nearest_anchors(x, self.vocab.mask_id)
        K, D = self.vocab.size, self.max_dist
        prev_key = (np.maximum(pt, 0) * D + np.minimum(pd, D) - 1)
        next_key = K * D + (np.maximum(nt, 0) * D + np.minimum(nd, D) - 1)
        return np.where(pt >= 0, prev_key, np.where(nt >= 0, next_key, self.num_keys - 1))

    def forward(self, x, t):
        x = np.asarray(x)
        keys = self.keys(x)
        logits = self.params["table"][keys].astype(np.float64)
        masked = x == self.vocab.mask_id
        logits = _pin_visible(logits, x, self.vocab.mask_id)
        return logits, (keys, masked)

    def backward(self, cache, dlogits):
        keys, masked = cache
        grad = np.zeros(self.params["table"].shape, dtype=np.float64)
        np.add.at(grad, keys[masked], dlogits[masked])
        return {"table": grad}


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of a scalar time: sin/cos at doubling frequencies."""
    t = np.asarray(t, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class MLPPredictor(TrainablePredictor):
    """One-hidden-layer MLP applied per token.

    Input: one-hot ids of the ``radius`` tokens above and below in the same
    column (an extra "outside" category pads the chunk edges) concatenated
    with a sinusoidal embedding of the token's own frame time.
    """

    kind = "mlp"

    def __init__(self, vocab: Vocabulary, radius: int = 3, hidden: int = 32, t_dim: int = 8,
                 seed: int = 0):
        super().__init__(vocab)
        self.radius, self.hidden, self.t_dim, self.seed = int(radius), int(hidden), int(t_dim), int(seed)
        rng = np.random.default_rng(seed)
        d_in = self.input_dim
        self.params["w1"] = (rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)).astype(np.float32)
        self.params["b1"] = np.zeros(hidden, dtype=np.float32)
        self.params["w2"] = (rng.standard_normal((hidden, vocab.size)) / np.sqrt(hidden)
                             ).astype(np.float32)
        self.params["b2"] = np.zeros(vocab.size, dtype=np.float32)

    @property
    def input_dim(self) -> int:
        return 2 * self.radius * (self.vocab.size + 1) + self.t_dim

    def config(self) -> dict:
        return {"radius": self.radius, "hidden": self.hidden, "t_dim": self.t_dim,
                "seed": self.seed}

    def features(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        B, k, n = x.shape
        K, r = self.vocab.size, self.radius
        padded = np.full((B, k + 2 * r, n), K, dtype=np.intp)
        padded[:, r:r + k] = x
        blocks = []
        eye = np.eye(K + 1)
        for off in list(range(-r, 0)) + list(range(1, r + 1)):
            blocks.append(eye[padded[:, r + off:r + off + k]])
        temb = timestep_embedding(t, self.t_dim)
        blocks.append(np.broadcast_to(temb[:, :, None, :], (B, k, n, self.t_dim)))
        return np.concatenate(blocks, axis=-1)

    def forward(self, x, t):
        x = np.asarray(x)
        t = np.asarray(t, dtype=np.float64)
        p = self.params
        feats = self.features(x, t).astype(p["w1"].dtype)
        h = np.tanh(feats @ p["w1"] + p["b1"])
        logits = (h @ p["w2"] + p["b2"]).astype(np.float64)
        masked = x == self.vocab.mask_id
        logits = _pin_visible(logits, x, self.vocab.mask_id)
        return logits, (feats, h, masked)

    def backward(self, cache, dlogits):
        feats, h, masked = cache
        p = self.params
        dz = np.where(masked[..., None], dlogits, 0.0)
        F = feats.reshape(-1, feats.shape[-1]).astype(np.float64)
        H = h.reshape(-1, h.shape[-1]).astype(np.float64)
        dZ = dz.reshape(-1, dz.shape[-1])
        dH = (dZ @ p["w2"].astype(np.float64).T) * (1.0 - H * H)
        return {
            "w2": H.T @ dZ,
            "b2": dZ.sum(axis=0),
            "w1": F.T @ dH,
            "b1": dH.sum(axis=0),
        }


MODEL_KINDS = {"tabular": TabularPredictor, "mlp": MLPPredictor}

