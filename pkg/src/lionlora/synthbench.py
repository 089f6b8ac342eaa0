"""Synthetic motion clips, adapter training, and the linearity / fusion experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterSet, ScaledAdapter, init_adapter
from .clip import FrameSequence
from .diagnostics import (
    LinearityReport,
    centroids,
    mean_direction,
    mean_trajectory,
    motion_magnitude,
    pearson,
    pixel_coordinates,
    trajectory_smoothness,
)
from .errors import (
    ChecksumError,
    ConfigError,
    DomainError,
    PropagationError,
    TrainingFailureError,
    UndefinedCentroidError,
)
from .fusion import FusionPlan
from .model import ModelConfig, ToyDiT, ddim_sample_batch, to_signal, training_loss
from .optim import Adam
from .scaling import ClipSampler, ScalingEmbedder, sample_frame_indices
from .weightfile import Section, read_weight_file, write_weight_file

log = logging.getLogger(__name__)

PRIMITIVES = ("offset_h", "offset_v", "forward_back", "orbit", "object_motion")
# per-frame steps sized for a 120-frame clip: roughly half a scene unit of travel
DEFAULT_STEPS = {"offset_h": 0.0045, "offset_v": 0.0045, "forward_back": 0.004,
                 "orbit": 0.006, "object_motion": 0.0045}
SCENE_EXTENT = 0.35
SPLAT_RADIUS_PX = 1.5
ARMS = ("scaling_token", "adapter_scale")


@dataclass
class Scene:
    points: np.ndarray  # (P, 4): x, y, intensity, is_object
    seed: int

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def is_object(self) -> np.ndarray:
        return self.points[:, 3] > 0.5


@dataclass(frozen=True)
class MotionPrimitive:
    kind: str
    step: float | None = None

    def __post_init__(self):
        if self.kind not in PRIMITIVES and self.kind != "static":
            raise ConfigError(f"unknown primitive {self.kind!r}; valid kinds: {', '.join(PRIMITIVES)}")
        if self.step is None:
            object.__setattr__(self, "step", DEFAULT_STEPS.get(self.kind, 0.0))


def generate_scene(seed: int, num_points: int = 4, extent: float = SCENE_EXTENT) -> Scene:
    if num_points < 1:
        raise ConfigError("a scene needs at least one point")
    rng = np.random.default_rng([seed, 0x5CE7E])
    xy = rng.uniform(-extent, extent, size=(num_points, 2))
    inten = rng.uniform(0.6, 1.0, size=num_points)
    obj = rng.random(num_points) < 0.3
    obj[0] = True
    return Scene(np.column_stack([xy, inten, obj.astype(float)]), seed)


def scene_positions(scene: Scene, primitive: MotionPrimitive, frame: int) -> np.ndarray:
    xy = scene.xy.copy()
    s = primitive.step * frame
    kind = primitive.kind
    if kind == "offset_h":
        xy[:, 0] += s
    elif kind == "offset_v":
        xy[:, 1] += s
    elif kind == "forward_back":
        xy *= 1.0 + s
    elif kind == "orbit":
        c, sn = math.cos(s), math.sin(s)
        xy = xy @ np.array([[c, sn], [-sn, c]])
    elif kind == "object_motion":
        xy[scene.is_object, 0] += s
    return xy


def rasterize(xy: np.ndarray, intensity: np.ndarray, frame_size: int,
              radius_px: float = SPLAT_RADIUS_PX) -> np.ndarray:
    """Gaussian splats (sigma = radius in pixels) summed and clipped to [0, 1]."""
    coords = pixel_coordinates(frame_size)
    sigma = radius_px * 2.0 / frame_size
    gx = np.exp(-((coords[None, :] - xy[:, :1]) ** 2) / (2 * sigma ** 2))  # (P, F) over columns
    gy = np.exp(-((coords[None, :] - xy[:, 1:2]) ** 2) / (2 * sigma ** 2))  # (P, F) over rows
    img = np.einsum("p,pr,pc->rc", intensity, gy, gx)
    return np.clip(img, 0.0, 1.0)


def render_clip(scene: Scene, primitive: MotionPrimitive, clip_length: int,
                frame_size: int = 16) -> FrameSequence:
    """Render ``clip_length`` frames; points leaving [-1, 1]^2 are dropped and counted."""
    if clip_length < 2:
        raise ConfigError("a clip needs at least two frames")
    frames = np.empty((clip_length, frame_size, frame_size))
    clipped = 0
    for t in range(clip_length):
        xy = scene_positions(scene, primitive, t)
        inside = (np.abs(xy) <= 1.0).all(axis=1)
        clipped += int((~inside).sum())
        frames[t] = rasterize(xy[inside], scene.points[inside, 2], frame_size)
    prov = {"scene_seed": scene.seed, "primitive": primitive.kind, "step": primitive.step,
            "N": clip_length, "clipped_points": clipped}
    return FrameSequence(frames.astype(np.float32), prov)


def make_training_pair(clip: FrameSequence, sampler: ClipSampler, s: float
                       ) -> tuple[FrameSequence, float]:
    idx = sample_frame_indices(sampler, s)
    frames = np.asarray(clip.frames)[idx]
    return FrameSequence(frames, {**clip.provenance, "S": s, "indices": idx}), s


# ---------------------------------------------------------------------------
# datasets


def build_clips(primitive: str, num_scenes: int, clip_length: int, frame_size: int,
                seed: int, num_points: int = 4) -> np.ndarray:
    """(num_scenes, N, F, F) clips for one primitive; scene seeds derive from ``seed``."""
    prim = MotionPrimitive(primitive)
    seeds = scene_seeds(seed, num_scenes)
    return np.stack([render_clip(generate_scene(s, num_points), prim, clip_length,
                                 frame_size).frames for s in seeds])


def scene_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence([seed, 0xC11B])
    return [int(x) for x in ss.generate_state(count)]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(out_dir, primitive: str, num_scenes: int, clip_length: int,
                  frame_size: int = 16, seed: int = 0, num_points: int = 4) -> dict:
    """One LIONWT file per clip plus ``manifest.json`` with SHA-256 checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prim = MotionPrimitive(primitive)
    entries = []
    for k, s in enumerate(scene_seeds(seed, num_scenes)):
        clip = render_clip(generate_scene(s, num_points), prim, clip_length, frame_size)
        name = f"clip_{k:05d}.lw"
        write_weight_file(out / name, [Section("clip", {"frames": clip.frames}, clip.provenance)])
        entries.append({"file": name, "sha256": sha256_file(out / name), **clip.provenance})
    manifest = {"primitive": primitive, "clip_length": clip_length, "frame_size": frame_size,
                "seed": seed, "clips": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir) -> tuple[dict, np.ndarray]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        path = data_dir / entry["file"]
        if sha256_file(path) != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for {path}")
        clips.append(read_weight_file(path)["clip"].tensors["frames"])
    return manifest, np.stack(clips)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 5e-4
    batch_size: int = 8
    rank: int = 8
    seed: int = 0
    arm: str = "scaling_token"
    num_frequencies: int = 8

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        for name in ("lr", "batch_size", "rank", "num_frequencies"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")


@dataclass
class BaseTrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 8
    num_scenes: int = 100
    seed: int = 0


def _guard(losses: list[float], patience: int = 100) -> None:
    """Divergence: loss above 10x the initial loss for ``patience`` consecutive steps."""
    if len(losses) < patience:
        return
    limit = 10.0 * losses[0]
    if all(l > limit or not math.isfinite(l) for l in losses[-patience:]):
        raise TrainingFailureError(
            f"training diverged: loss {losses[-1]:.4g} > 10x initial {losses[0]:.4g}")


def pretrain_base(config: ModelConfig, train: BaseTrainConfig | None = None,
                  model: ToyDiT | None = None) -> tuple[ToyDiT, list[float]]:
    """Train the base model on static clips (every frame equals the first)."""
    train = train or BaseTrainConfig()
    model = model or ToyDiT(config, seed=train.seed)
    stills = build_clips("static", train.num_scenes, 2, config.frame_size,
                         seed=train.seed + 7919)[:, 0]
    rng = np.random.default_rng([train.seed, 0xBA5E])
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=train.lr)
    losses = []
    try:
        for _ in range(train.steps):
            pick = rng.integers(0, len(stills), size=train.batch_size)
            x0 = to_signal(np.repeat(stills[pick][:, None], config.frames, axis=1))
            with T.Tape() as tape:
                loss = training_loss(model, x0, x0[:, 0], rng)
            opt.step(T.backward(tape, loss))
            losses.append(loss.item())
            _guard(losses)
    except PropagationError as exc:
        raise TrainingFailureError(f"training diverged at step {len(losses)}: {exc}") from exc
    finally:
        model.set_trainable(False)
    return model, losses


def train_lora(model: ToyDiT, clips: np.ndarray, config: TrainConfig, primitive: str = "",
               clip_length: int | None = None) -> tuple[AdapterSet, ScalingEmbedder | None, list[float]]:
    """Fit one adapter (and, in the scaling-token arm, its embedder) to motion clips.

    Each step draws per-sample scaling values S uniformly from [s, 1] and the V
    frames sampled from the first ceil(N * S) frames of each clip. The scaling
    token arm appends a token encoding S; the adapter-scale arm instead injects
    the adapter with lambda = S. Only adapter and embedder parameters change.
    """
    cfg = model.config
    clips = np.asarray(clips)
    n = clip_length or clips.shape[1]
    sampler = ClipSampler(n, cfg.frames)
    name = primitive or "adapter"
    adapters = init_adapter(cfg, config.rank, seed=config.seed, name=name, dtype=model.dtype)
    adapters.metadata.update({"primitive": primitive, "arm": config.arm, "steps": config.steps,
                              "seed": config.seed, "clip_length": n})
    embedder = None
    params = adapters.parameters()
    if config.arm == "scaling_token":
        embedder = ScalingEmbedder.create(name, cfg.channels, config.num_frequencies,
                                          s_min=sampler.s_min, seed=config.seed + 1,
                                          dtype=model.dtype)
        params = params + embedder.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x10BA])
    losses: list[float] = []
    try:
        for _ in range(config.steps):
            pick = rng.integers(0, len(clips), size=config.batch_size)
            values = rng.uniform(sampler.s_min, 1.0, size=config.batch_size)
            x0 = np.stack([clips[p][sample_frame_indices(sampler, s)] for p, s in zip(pick, values)])
            x0 = to_signal(x0)
            with T.Tape() as tape:
                if embedder is not None:
                    loss = training_loss(model, x0, x0[:, 0], rng, adapters,
                                         embedder.embed_batch(values))
                else:
                    loss = training_loss(model, x0, x0[:, 0], rng,
                                         ScaledAdapter(adapters, row_factors=values))
            opt.step(T.backward(tape, loss))
            losses.append(loss.item())
            _guard(losses)
    except PropagationError as exc:
        raise TrainingFailureError(f"training diverged at step {len(losses)}: {exc}") from exc
    finally:
        for p in params:
            p.requires_grad = False
    return adapters, embedder, losses


def smoothed(losses: Sequence[float], window: int = 100) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    window = max(1, min(window, len(x)))
    return np.convolve(x, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# evaluation


def generate(model: ToyDiT, conditions: np.ndarray, adapters: AdapterSet,
             embedder: ScalingEmbedder | None, s: float, steps: int = 50, seed: int = 0
             ) -> np.ndarray:
    """Frames for a batch of condition frames at one scaling value.

    With an embedder the scaling token carries S; without one, S becomes the
    adapter's injection strength.
    """
    conditions = np.asarray(conditions)
    if embedder is not None:
        token = embedder.embed_batch([s])
        return ddim_sample_batch(model, conditions, steps, adapters, token, seed)
    return ddim_sample_batch(model, conditions, steps, _lam(adapters, s), None, seed)


def _lam(adapters: AdapterSet, s: float) -> AdapterSet:
    return AdapterSet(adapters.name, adapters.layers, adapters.lam * s, adapters.metadata)


def eval_linearity(model: ToyDiT, adapters: AdapterSet, embedder: ScalingEmbedder | None,
                   s_grid: Sequence[float], conditions: np.ndarray, steps: int = 50,
                   seed: int = 0, frames_out: dict | None = None) -> LinearityReport:
    """Pearson r between S and the mean generated motion magnitude over probe conditions.

    ``frames_out``, when given, receives the generated batch for every S.
    """
    s_grid = [float(s) for s in s_grid]
    if len(s_grid) < 3:
        raise DomainError("need at least three scaling values")
    if embedder is not None:
        for s in s_grid:
            embedder.check(s)
    arm = "scaling_token" if embedder is not None else "adapter_scale"
    per_probe = np.full((len(s_grid), len(conditions)), np.nan)
    excluded = 0
    for i, s in enumerate(s_grid):
        frames = generate(model, conditions, adapters, embedder, s, steps, seed)
        if frames_out is not None:
            frames_out[s] = frames
        for j, clip in enumerate(frames):
            try:
                per_probe[i, j] = motion_magnitude(clip)
            except UndefinedCentroidError:
                excluded += 1
    mags = [float(np.nanmean(row)) for row in per_probe]
    return LinearityReport(s_grid, mags, pearson(s_grid, mags), arm, per_probe, excluded)


@dataclass
class FusionOutcome:
    mode: str
    direction_deg: float
    smoothness: float
    magnitude: float
    per_probe_direction: list[float] = field(default_factory=list)


def eval_fusion_direction(model: ToyDiT, adapters: Sequence[AdapterSet],
                          embedders: Sequence[ScalingEmbedder], values: Sequence[float],
                          conditions: np.ndarray, mode: str = "norm_consistent",
                          steps: int = 50, seed: int = 0) -> FusionOutcome:
    """Mean displacement direction and turning smoothness of fused generations.

    The trajectory is the per-frame centroid averaged over probe conditions.
    """
    from .multifuse import FusedContext, fused_sample_batch

    plan = FusionPlan(list(adapters), [1.0] * len(adapters), mode)
    context = FusedContext.from_embedders(plan, list(embedders), list(values))
    frames = fused_sample_batch(model, np.asarray(conditions), context, steps, seed)
    mean_path = mean_trajectory(frames)
    dirs = [mean_direction(f) for f in frames]
    return FusionOutcome(mode, mean_direction(mean_path), trajectory_smoothness(mean_path),
                         float(np.mean([motion_magnitude(f) for f in frames])), dirs)
