"""A small diffusion transformer over patchified frame clips.

Token layout for one sample: row 0 is the condition token (the clean first
frame, embedded as one vector); rows ``1 .. V*P`` are frame patches in
frame-major, raster order; any scaling tokens are appended after them.
Each patch token sees its noisy patch concatenated with the co-located patch of
the condition frame. Positions use a fixed sinusoidal code of (frame, row,
column) and the timestep is added to every frame/condition token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .clip import FrameSequence
from .errors import AttachmentError, ConfigError
from .tensor import DTYPES, Tensor
from .weightfile import Section, read_weight_file, write_weight_file

ROLES = ("q", "k", "v", "o", "mlp_in", "mlp_out")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 6
    channels: int = 64
    heads: int = 4
    frames: int = 13
    frame_size: int = 16
    patch_size: int = 4
    diffusion_steps: int = 200
    mlp_ratio: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.frame_size % self.patch_size:
            raise ConfigError(
                f"frame_size {self.frame_size} not divisible by patch_size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch_size

    @property
    def patches_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.frames * self.patches_per_frame + 1

    def attachment_points(self) -> dict[str, tuple[int, int]]:
        d, h = self.channels, self.channels * self.mlp_ratio
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "mlp_in": (d, h), "mlp_out": (h, d)}
        return {f"blocks.{i}.{role}": dims[role]
                for i in range(self.num_blocks) for role in ROLES}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TokenSequence:
    """Raw patch rows plus the condition frame; embedding turns it into ``H``."""

    patches: np.ndarray    # (B, V*P, p*p)
    condition: np.ndarray  # (B, F, F)

    @property
    def n(self) -> int:
        return self.patches.shape[1] + 1

    @property
    def batch(self) -> int:
        return self.patches.shape[0]


def _check_frames(frames: np.ndarray, config: ModelConfig) -> None:
    if frames.shape[-3:] != (config.frames, config.frame_size, config.frame_size):
        raise ConfigError(
            f"frames of shape {frames.shape[-3:]} do not match config "
            f"({config.frames}, {config.frame_size}, {config.frame_size})")


def _to_patches(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    # (..., F, F) -> (..., g*g, p*p)
    g, p = config.grid, config.patch_size
    lead = x.shape[:-2]
    x = x.reshape(lead + (g, p, g, p))
    nd = len(lead)
    x = x.transpose(tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3))
    return x.reshape(lead + (g * g, p * p))


def _from_patches(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    g, p = config.grid, config.patch_size
    lead = x.shape[:-2]
    x = x.reshape(lead + (g, g, p, p))
    nd = len(lead)
    x = x.transpose(tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3))
    return x.reshape(lead + (g * p, g * p))


def patchify(frames, config: ModelConfig, condition=None) -> TokenSequence:
    """Split (B, V, F, F) or (V, F, F) frames into patch rows.

    ``condition`` defaults to the first frame of each clip.
    """
    frames = np.asarray(frames.frames if isinstance(frames, FrameSequence) else frames)
    if frames.ndim == 3:
        frames = frames[None]
        if condition is not None:
            condition = np.asarray(condition)[None]
    _check_frames(frames, config)
    if condition is None:
        condition = frames[:, 0]
    condition = np.asarray(condition)
    if condition.shape != (frames.shape[0], config.frame_size, config.frame_size):
        raise ConfigError(f"condition of shape {condition.shape} does not match frames")
    patches = _to_patches(frames, config)  # (B, V, P, p*p)
    b = frames.shape[0]
    return TokenSequence(patches.reshape(b, -1, config.patch_dim), condition)


def unpatchify(patches: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Inverse of patchify on the patch rows: (B, V*P, p*p) -> (B, V, F, F)."""
    patches = np.asarray(patches)
    b = patches.shape[0]
    x = patches.reshape(b, config.frames, config.patches_per_frame, config.patch_dim)
    return _from_patches(x, config)


def sinusoid(positions: np.ndarray, dim: int, base: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    out = np.zeros((positions.shape[0], dim))
    if half:
        freqs = base ** (-np.arange(half) / half)
        out[:, :half] = np.sin(positions * freqs)
        out[:, half:2 * half] = np.cos(positions * freqs)
    return out


def position_table(config: ModelConfig) -> np.ndarray:
    """Fixed (n, d) code of (frame, row, column); row 0 (condition) is zero."""
    d = config.channels
    d_frame = d // 2
    d_row = (d - d_frame) // 2
    d_col = d - d_frame - d_row
    v, r, c = np.meshgrid(np.arange(config.frames), np.arange(config.grid),
                          np.arange(config.grid), indexing="ij")
    table = np.concatenate([sinusoid(v.ravel(), d_frame, 100.0),
                            sinusoid(r.ravel(), d_row, 100.0),
                            sinusoid(c.ravel(), d_col, 100.0)], axis=1)
    return np.concatenate([np.zeros((1, d)), table], axis=0)


class NoiseSchedule:
    """Linear beta schedule from 1e-4 to 0.02."""

    def __init__(self, steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps)
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def add_noise(self, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(t)].reshape((-1,) + (1,) * (x0.ndim - 1))
        return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)

    def ddim_timesteps(self, steps: int) -> np.ndarray:
        if steps < 1:
            raise ConfigError("DDIM needs at least one step")
        if steps > self.steps:
            raise ConfigError(f"{steps} DDIM steps exceed {self.steps} diffusion steps")
        return np.unique(np.round(np.linspace(0, self.steps - 1, steps)).astype(int))[::-1]


class ToyDiT:
    """Pre-LN transformer with six adaptable linear layers per block."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype: str = "f32"):
        self.config = config
        self.dtype = dtype
        self.schedule = NoiseSchedule(config.diffusion_steps)
        rng = np.random.default_rng(seed)
        cfg = config
        d = cfg.channels
        f = DTYPES[dtype]

        def normal(shape, fan_in, gain=1.0):
            return Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), size=shape).astype(f))

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=f))

        p: dict[str, Tensor] = {}
        p["patch_embed.weight"] = normal((2 * cfg.patch_dim, d), 2 * cfg.patch_dim)
        p["patch_embed.bias"] = zeros((d,))
        p["cond_embed.weight"] = normal((cfg.frame_size ** 2, d), cfg.frame_size ** 2)
        p["cond_embed.bias"] = zeros((d,))
        p["time_embed.weight"] = normal((d, d), d)
        p["time_embed.bias"] = zeros((d,))
        for lid, (d_in, d_out) in cfg.attachment_points().items():
            gain = 0.5 if lid.endswith((".o", ".mlp_out")) else 1.0
            p[f"{lid}.weight"] = normal((d_in, d_out), d_in, gain)
            p[f"{lid}.bias"] = zeros((d_out,))
        p["head.weight"] = normal((d, cfg.patch_dim), d, 0.1)
        p["head.bias"] = zeros((cfg.patch_dim,))
        self.params = p
        self.pos = Tensor(position_table(cfg).astype(f))

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def to(self, dtype: str) -> "ToyDiT":
        clone = ToyDiT.__new__(ToyDiT)
        clone.config = self.config
        clone.dtype = dtype
        clone.schedule = self.schedule
        clone.params = {k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()}
        clone.pos = Tensor(self.pos.data, dtype=dtype)
        return clone

    def copy(self) -> "ToyDiT":
        clone = self.to(self.dtype)
        clone.params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return clone

    def checksum(self) -> str:
        return T.parameters_checksum(self.params[k] for k in sorted(self.params))

    def save(self, path) -> None:
        sec = Section("model", {k: v.data for k, v in self.params.items()},
                      {"config": self.config.to_dict(), "dtype": self.dtype})
        write_weight_file(path, [sec])

    @classmethod
    def load(cls, path) -> "ToyDiT":
        sec = read_weight_file(path)["model"]
        model = cls(ModelConfig.from_dict(sec.meta["config"]), dtype=sec.meta["dtype"])
        for k in model.params:
            model.params[k] = Tensor(sec.tensors[k])
        return model

    # -- layers ----------------------------------------------------------------

    def linear(self, x: Tensor, lid: str, adapters=None, capture: dict | None = None) -> Tensor:
        if capture is not None:
            capture[lid] = x.data
        y = x @ self.params[f"{lid}.weight"] + self.params[f"{lid}.bias"]
        if adapters is not None:
            extra = adapters.contribution(lid, x)
            if extra is not None:
                y = y + extra
        return y

    def attention(self, h: Tensor, i: int, adapters=None, capture=None) -> Tensor:
        b, m, d = h.shape
        heads = self.config.heads
        dh = d // heads
        x = T.layer_norm(h)

        def split(role):
            y = self.linear(x, f"blocks.{i}.{role}", adapters, capture)
            return y.reshape(b, m, heads, dh).transpose(0, 2, 1, 3)

        q, k, v = split("q"), split("k"), split("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = T.softmax_rows(scores)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, m, d)
        return self.linear(o, f"blocks.{i}.o", adapters, capture)

    def mlp(self, h: Tensor, i: int, adapters=None, capture=None) -> Tensor:
        x = T.layer_norm(h)
        x = T.gelu(self.linear(x, f"blocks.{i}.mlp_in", adapters, capture))
        return self.linear(x, f"blocks.{i}.mlp_out", adapters, capture)

    def block(self, h: Tensor, i: int, adapters=None, capture=None) -> Tensor:
        h = h + self.attention(h, i, adapters, capture)
        return h + self.mlp(h, i, adapters, capture)

    # -- embedding / head --------------------------------------------------------

    def embed(self, tokens: TokenSequence, timesteps) -> Tensor:
        """H: (B, n, d) for the condition token and the frame patches."""
        cfg = self.config
        f = DTYPES[self.dtype]
        b = tokens.batch
        if tokens.patches.shape[1:] != (cfg.frames * cfg.patches_per_frame, cfg.patch_dim):
            raise ConfigError(f"token patches of shape {tokens.patches.shape} do not match config")
        cond_patches = _to_patches(np.asarray(tokens.condition), cfg)  # (B, P, p*p)
        cond_patches = np.tile(cond_patches, (1, cfg.frames, 1))
        x = Tensor(np.concatenate([tokens.patches, cond_patches], axis=-1).astype(f))
        h_patch = x @ self.params["patch_embed.weight"] + self.params["patch_embed.bias"]
        cond = Tensor(np.asarray(tokens.condition).reshape(b, 1, -1).astype(f))
        h_cond = cond @ self.params["cond_embed.weight"] + self.params["cond_embed.bias"]
        h = T.concat([h_cond, h_patch], axis=1) + self.pos
        t = np.broadcast_to(np.asarray(timesteps), (b,))
        if (t < 0).any() or (t >= cfg.diffusion_steps).any():
            raise ConfigError(f"timesteps must lie in [0, {cfg.diffusion_steps})")
        temb = Tensor(sinusoid(t, cfg.channels, 10000.0).astype(f))
        temb = temb @ self.params["time_embed.weight"] + self.params["time_embed.bias"]
        return h + T.tile_rows(temb, h.shape[1])

    def head(self, h: Tensor) -> Tensor:
        """Noise prediction (B, V, F, F) from the frame-patch rows of ``h``."""
        cfg = self.config
        rows = cfg.frames * cfg.patches_per_frame
        x = T.layer_norm(h)[:, 1:1 + rows, :]
        y = x @ self.params["head.weight"] + self.params["head.bias"]
        b = h.shape[0]
        g, p = cfg.grid, cfg.patch_size
        y = y.reshape(b, cfg.frames, g, g, p, p).transpose(0, 1, 2, 4, 3, 5)
        return y.reshape(b, cfg.frames, cfg.frame_size, cfg.frame_size)

    def check_adapters(self, adapters) -> None:
        if adapters is None:
            return
        points = self.config.attachment_points()
        unknown = sorted(set(adapters.ids()) - set(points))
        if unknown:
            raise AttachmentError(f"unknown attachment ids {unknown}")

    def forward(self, tokens: TokenSequence, timesteps, adapters=None, scaling=None,
                capture: dict | None = None) -> Tensor:
        """Epsilon prediction with the shape of the noised frames.

        ``scaling`` is a single scaling token (a ``ScalingToken`` or a (B, d)
        tensor); it is appended after the frame tokens and requires an adapter.
        """
        if scaling is not None and adapters is None:
            raise ConfigError("a scaling token requires its adapter")
        self.check_adapters(adapters)
        h = self.embed(tokens, timesteps)
        if scaling is not None:
            from .scaling import augment_sequence
            h = augment_sequence(h, scaling)
        for i in range(self.config.num_blocks):
            h = self.block(h, i, adapters, capture)
        return self.head(h)

    __call__ = forward


def training_loss(model: ToyDiT, x0: np.ndarray, condition: np.ndarray, rng: np.random.Generator,
                  adapters=None, scaling=None) -> Tensor:
    """Epsilon-prediction MSE at uniformly drawn timesteps."""
    f = DTYPES[model.dtype]
    b = x0.shape[0]
    t = rng.integers(0, model.config.diffusion_steps, size=b)
    eps = rng.standard_normal(x0.shape).astype(f)
    xt = model.schedule.add_noise(x0.astype(f), t, eps)
    pred = model.forward(patchify(xt, model.config, condition), t, adapters, scaling)
    return T.mse(pred, Tensor(eps))


def ddim_loop(schedule: NoiseSchedule, predict: Callable[[np.ndarray, int], np.ndarray],
              shape: Sequence[int], steps: int, seed: int, dtype=np.float32) -> np.ndarray:
    """Deterministic (eta = 0) DDIM; returns the final clean estimate in [-1, 1]."""
    ts = schedule.ddim_timesteps(steps)
    x = np.random.default_rng(seed).standard_normal(tuple(shape)).astype(dtype)
    x0 = x
    for j, t in enumerate(ts):
        ab = schedule.alpha_bar[t]
        eps = predict(x, int(t))
        x0 = np.clip((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
        eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        ab_prev = schedule.alpha_bar[ts[j + 1]] if j + 1 < len(ts) else 1.0
        x = (math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps).astype(dtype)
    return x0


def to_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


def to_signal(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames) * 2.0 - 1.0


def ddim_sample_batch(model: ToyDiT, conditions: np.ndarray, steps: int = 50, adapters=None,
                      scaling=None, seed: int = 0) -> np.ndarray:
    """Generate (B, V, F, F) pixel frames for a batch of condition frames."""
    cfg = model.config
    conditions = np.asarray(conditions)
    if conditions.shape[1:] != (cfg.frame_size, cfg.frame_size):
        raise ConfigError(f"condition frames of shape {conditions.shape[1:]} do not match config")
    cond_signal = to_signal(conditions)
    b = conditions.shape[0]
    f = DTYPES[model.dtype]

    def predict(x, t):
        out = model.forward(patchify(x, cfg, cond_signal), np.full(b, t), adapters, scaling)
        return out.data

    x0 = ddim_loop(model.schedule, predict, (b, cfg.frames, cfg.frame_size, cfg.frame_size),
                   steps, seed, f)
    return to_pixels(x0)


def ddim_sample(model: ToyDiT, condition_frame: np.ndarray, steps: int = 50, adapters=None,
                scaling=None, seed: int = 0) -> FrameSequence:
    frames = ddim_sample_batch(model, np.asarray(condition_frame)[None], steps, adapters,
                               scaling, seed)[0]
    return FrameSequence(frames, {"steps": steps, "seed": seed})
