"""Token-space value types: vocabulary, videos, chunks and timestep vectors.

Frames are stored as rows of a ``(L, N)`` integer array rather than as
separate objects; a ``TokenFrame`` is just a 1-D view.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TOKEN_DTYPE = np.uint16
BINARY_MAGIC = b"MFTV"
_HEADER = struct.Struct("<4sIII")


class TokenRangeError(ValueError):
    """Raised when a slice or index falls outside a video."""


@dataclass(frozen=True)
class Vocabulary:
    size: int
    mask_id: int | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if self.mask_id is None:
            object.__setattr__(self, "mask_id", self.size - 1)
        if not 0 <= self.mask_id < self.size:
            raise ValueError(f"mask_id {self.mask_id} outside [0, {self.size})")

    @property
    def data_ids(self) -> np.ndarray:
        ids = np.arange(self.size)
        return ids[ids != self.mask_id]

    @property
    def num_data(self) -> int:
        return self.size - 1


def masked_frame(n_tokens: int, vocab: Vocabulary) -> np.ndarray:
    if n_tokens < 1:
        raise ValueError("a frame needs at least one token")
    return np.full(n_tokens, vocab.mask_id, dtype=TOKEN_DTYPE)


def _as_frames(frames) -> np.ndarray:
    arr = np.asarray(frames)
    if arr.ndim != 2:
        raise ValueError(f"frames must be a 2-D (L, N) array, got shape {arr.shape}")
    return arr.astype(TOKEN_DTYPE, copy=False)


@dataclass(frozen=True)
class TokenVideo:
    frames: np.ndarray
    vocab: Vocabulary

    def __post_init__(self):
        frames = _as_frames(self.frames)
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError("a video needs at least one frame of at least one token")
        if frames.size and int(frames.max()) >= self.vocab.size:
            raise ValueError("token id outside vocabulary")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.length

    def __eq__(self, other):
        if not isinstance(other, TokenVideo):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.frames, other.frames)

    __hash__ = None

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "K": self.vocab.size,
            "N": self.tokens_per_frame,
            "mask_id": self.vocab.mask_id,
            "frames": self.frames.astype(int).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> TokenVideo:
        obj = json.loads(text)
        frames = np.asarray(obj["frames"], dtype=np.int64)
        if frames.ndim != 2 or frames.shape[1] != obj["N"]:
            raise ValueError("frame array does not match declared N")
        return cls(frames, Vocabulary(obj["K"], obj["mask_id"]))

    def to_bytes(self) -> bytes:
        """Packed little-endian form: 16-byte header then u16 tokens.

        The header carries K, N and L only, so the mask id must be the default
        ``K - 1`` for an exact round trip.
        """
        if self.vocab.mask_id != self.vocab.size - 1:
            raise ValueError("binary form requires mask_id == K - 1")
        header = _HEADER.pack(BINARY_MAGIC, self.vocab.size, self.tokens_per_frame, self.length)
        return header + self.frames.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> TokenVideo:
        if len(blob) < _HEADER.size:
            raise ValueError("truncated token video header")
        magic, k, n, length = _HEADER.unpack_from(blob)
        if magic != BINARY_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        body = np.frombuffer(blob, dtype="<u2", offset=_HEADER.size)
        if body.size != n * length:
            raise ValueError(f"expected {n * length} tokens, found {body.size}")
        return cls(body.reshape(length, n).astype(TOKEN_DTYPE), Vocabulary(k))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(self.to_json())
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> TokenVideo:
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_json(path.read_text())
        return cls.from_bytes(path.read_bytes())


@dataclass(frozen=True)
class Chunk:
    frames: np.ndarray
    context_count: int = 0

    def __post_init__(self):
        frames = _as_frames(self.frames)
        object.__setattr__(self, "frames", frames)
        if not 0 <= self.context_count < frames.shape[0]:
            raise ValueError(
                f"context_count {self.context_count} must lie in [0, {frames.shape[0]})")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def with_context(self, m: int) -> Chunk:
        return Chunk(self.frames, m)


def slice_chunk(video: TokenVideo, start: int, k: int) -> Chunk:
    if start < 0 or k < 1 or start + k > video.length:
        raise TokenRangeError(
            f"chunk [{start}, {start + k}) outside video of length {video.length}")
    return Chunk(video.frames[start:start + k].copy())


@dataclass(frozen=True)
class TimestepVector:
    """Per-frame flow times; ``1.0`` means clean, ``0.0`` fully masked."""

    values: np.ndarray = field()

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size == 0:
            raise ValueError("timestep vector must be non-empty")
        if np.any(vals < 0.0) or np.any(vals > 1.0) or not np.all(np.isfinite(vals)):
            raise ValueError("timestep components must lie in [0, 1]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def conditioned(cls, k: int, m: int, level: float = 0.0) -> TimestepVector:
        vals = np.full(k, level, dtype=np.float64)
        vals[:m] = 1.0
        return cls(vals)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)
