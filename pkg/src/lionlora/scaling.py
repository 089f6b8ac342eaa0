"""Scaling tokens: a Fourier code of the amplitude S projected into one extra token.

Training pairs come from a long clip of N frames: for a scaling value S the
first ``ceil(N * S)`` frames are uniformly subsampled down to V frames, so the
smallest admissible S is ``V / N`` (every frame of the first V) and S = 1 spans
the whole clip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, RangeError
from .tensor import DTYPES, Tensor
from .weightfile import Section

DEFAULT_FREQUENCIES = 8
_TOL = 1e-12

# documented presets: (clip length, frames per training clip)
CAMERA_PRESET = (600, 49)
OBJECT_MOTION_PRESET = (240, 49)


def fourier_embed(s: float, num_frequencies: int = DEFAULT_FREQUENCIES) -> np.ndarray:
    """``[sin(2^j pi s), cos(2^j pi s)]`` for j = 0..J-1, concatenated (length 2J)."""
    if num_frequencies < 1:
        raise RangeError("need at least one frequency")
    out = np.empty(2 * num_frequencies)
    for j in range(num_frequencies):
        x = (2.0 ** j) * s
        out[2 * j] = _sinpi(x)
        out[2 * j + 1] = _sinpi(x + 0.5)
    return out


def _sinpi(x: float) -> float:
    """sin(pi x), exact at multiples of 1/2."""
    r = math.fmod(x, 2.0)
    if r * 2.0 == round(r * 2.0):
        return (0.0, 1.0, 0.0, -1.0)[int(round(r * 2.0)) % 4]
    return math.sin(math.pi * r)


@dataclass
class ClipSampler:
    clip_length: int
    frames: int

    def __post_init__(self):
        if self.frames < 1 or self.clip_length < self.frames:
            raise RangeError(
                f"clip length {self.clip_length} cannot supply {self.frames} frames")

    @property
    def s_min(self) -> float:
        return self.frames / self.clip_length

    def check(self, s: float) -> None:
        if not (self.s_min - _TOL <= s <= 1.0 + _TOL):
            raise RangeError(f"scaling value {s} outside [{self.s_min:.6g}, 1]")

    def source_length(self, s: float) -> int:
        """M = ceil(N * S); the slack absorbs float error in products like 600 * (49/600)."""
        return math.ceil(self.clip_length * s - 1e-9)


def sample_frame_indices(sampler: ClipSampler, s: float) -> list[int]:
    sampler.check(s)
    m = sampler.source_length(s)
    v = sampler.frames
    if m < v:
        raise RangeError(f"only {m} source frames for {v} samples")
    if v == 1:
        return [0]
    return [(t * (m - 1)) // (v - 1) for t in range(v)]


@dataclass
class ScalingToken:
    E: Tensor          # (1, d)
    s: float
    adapter: str = ""


@dataclass
class ScalingEmbedder:
    """Per-adapter projection of the Fourier code to a d-dimensional token."""

    adapter: str
    projection: Tensor  # (2J, d)
    bias: Tensor        # (d,)
    s_min: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, adapter: str, channels: int, num_frequencies: int = DEFAULT_FREQUENCIES,
               s_min: float = 0.0, seed: int = 0, dtype: str = "f32") -> "ScalingEmbedder":
        rng = np.random.default_rng(seed)
        proj = rng.normal(0.0, 1.0 / math.sqrt(2 * num_frequencies),
                          size=(2 * num_frequencies, channels)).astype(DTYPES[dtype])
        return cls(adapter, Tensor(proj), Tensor(np.zeros(channels, dtype=DTYPES[dtype])), s_min)

    @property
    def num_frequencies(self) -> int:
        return self.projection.shape[0] // 2

    @property
    def channels(self) -> int:
        return self.projection.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.projection, self.bias]

    def check(self, s: float) -> None:
        if not (self.s_min - _TOL <= s <= 1.0 + _TOL):
            raise RangeError(f"scaling value {s} outside [{self.s_min:.6g}, 1]")

    def embed_batch(self, values) -> Tensor:
        """(B, d) tokens for a batch of scaling values; differentiable in the projection."""
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        for s in values:
            self.check(float(s))
        codes = np.stack([fourier_embed(float(s), self.num_frequencies) for s in values])
        codes = Tensor(codes.astype(self.projection.data.dtype))
        return codes @ self.projection + self.bias

    def to_section(self) -> Section:
        meta = {"adapter": self.adapter, "num_frequencies": self.num_frequencies,
                "s_min": self.s_min, **self.meta}
        return Section(f"scaling/{self.adapter}",
                       {"projection": self.projection.data, "bias": self.bias.data}, meta)

    @classmethod
    def from_section(cls, sec: Section) -> "ScalingEmbedder":
        extra = {k: v for k, v in sec.meta.items()
                 if k not in ("adapter", "num_frequencies", "s_min")}
        return cls(sec.meta["adapter"], Tensor(sec.tensors["projection"]),
                   Tensor(sec.tensors["bias"]), float(sec.meta["s_min"]), extra)

    def to(self, dtype: str) -> "ScalingEmbedder":
        return ScalingEmbedder(self.adapter, Tensor(self.projection.data, dtype=dtype),
                               Tensor(self.bias.data, dtype=dtype), self.s_min, dict(self.meta))


def make_scaling_token(embedder: ScalingEmbedder, s: float) -> ScalingToken:
    e = embedder.embed_batch([s])
    return ScalingToken(e, float(s), embedder.adapter)


def _token_rows(token, batch: int) -> Tensor:
    """Normalise a scaling token argument to (B, 1, d)."""
    if isinstance(token, ScalingToken):
        token = token.E
    if token.ndim == 2:
        if token.shape[0] == 1 and batch != 1:
            return T.tile_rows(token, batch).reshape(batch, 1, token.shape[-1])
        return token.reshape(token.shape[0], 1, token.shape[-1])
    return token


def augment_sequence(h: Tensor, token) -> Tensor:
    """``[H; E]``: append one scaling token after the last row of ``H``.

    ``h`` is (n, d) or (B, n, d); ``token`` is a ScalingToken, a (1, d) or
    (B, d) tensor. Rows 0..n-1 of the result are ``h`` unchanged.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    rows = _token_rows(token, h.shape[0])
    if rows.shape[-1] != h.shape[-1]:
        raise DimensionError(f"token width {rows.shape[-1]} != channel width {h.shape[-1]}")
    if rows.shape[0] != h.shape[0]:
        raise DimensionError(f"{rows.shape[0]} tokens for a batch of {h.shape[0]}")
    out = T.concat([h, rows], axis=1)
    return out.reshape(out.shape[1:]) if squeeze else out
