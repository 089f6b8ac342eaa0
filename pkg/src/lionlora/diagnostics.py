"""Measurements: adapter orthogonality and norms per block, linearity, motion proxies."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionError,
    DomainError,
    UndefinedCentroidError,
    UndefinedCorrelationError,
)
from .model import ToyDiT, patchify, to_signal
from .tensor import Tensor, cosine_similarity

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# statistics


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson needs equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise DomainError("pearson needs at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# motion proxies


def pixel_coordinates(frame_size: int) -> np.ndarray:
    """Scene coordinate of each pixel centre along one axis, spanning [-1, 1]."""
    return (np.arange(frame_size) + 0.5) / frame_size * 2.0 - 1.0


def centroids(frames) -> np.ndarray:
    """Intensity centroid (x, y) of every frame; x follows columns, y follows rows."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if frames.ndim != 3:
        raise DimensionError(f"expected (V, F, F) frames, got {frames.shape}")
    mass = frames.sum(axis=(1, 2))
    if (mass <= 0).any():
        raise UndefinedCentroidError("blank frame: zero total intensity")
    coords = pixel_coordinates(frames.shape[-1])
    cx = (frames.sum(axis=1) * coords).sum(axis=1) / mass
    cy = (frames.sum(axis=2) * coords).sum(axis=1) / mass
    return np.stack([cx, cy], axis=1)


def motion_magnitude(frames) -> float:
    """Mean centroid displacement between consecutive frames (scene units)."""
    c = centroids(frames)
    if c.shape[0] < 2:
        raise DomainError("motion_magnitude needs at least two frames")
    return float(np.linalg.norm(np.diff(c, axis=0), axis=1).mean())


def mean_trajectory(batch) -> np.ndarray:
    """Per-frame centroid averaged over a (B, V, F, F) batch of clips."""
    return np.stack([centroids(f) for f in np.asarray(batch)]).mean(axis=0)


def mean_direction(frames_or_centroids) -> float:
    """Angle in degrees of the mean displacement vector (0 = +x, 90 = +y)."""
    c = _as_path(frames_or_centroids)
    d = (c[-1] - c[0]) / (c.shape[0] - 1)
    if np.allclose(d, 0):
        raise DomainError("no net displacement; direction undefined")
    return math.degrees(math.atan2(d[1], d[0]))


def _as_path(frames_or_centroids) -> np.ndarray:
    arr = np.asarray(getattr(frames_or_centroids, "frames", frames_or_centroids), dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 2:
        return arr
    return centroids(arr)


def trajectory_smoothness(frames_or_centroids, min_step: float = 1e-12) -> float:
    """Mean absolute turning angle (radians) between consecutive displacement steps.

    Steps shorter than ``min_step`` are dropped before measuring angles.
    """
    c = _as_path(frames_or_centroids)
    if c.shape[0] < 3:
        raise DomainError("trajectory_smoothness needs at least three positions")
    steps = np.diff(c, axis=0)
    steps = steps[np.linalg.norm(steps, axis=1) > min_step]
    if steps.shape[0] < 2:
        raise DomainError("fewer than two non-zero steps; smoothness undefined")
    a, b = steps[:-1], steps[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = (a * b).sum(axis=1)
    return float(np.abs(np.arctan2(cross, dot)).mean())


# ---------------------------------------------------------------------------
# adapter activation profiles


@dataclass
class SimilarityProfile:
    mean: np.ndarray           # (num_blocks,)
    std: np.ndarray
    samples: np.ndarray        # (num_blocks, probes), NaN where excluded
    excluded: int = 0
    names: tuple[str, str] = ("a", "b")

    def shallow_deep(self) -> tuple[float, float]:
        """Mean |similarity| over the first and second half of the blocks."""
        half = len(self.mean) // 2
        vals = np.abs(self.samples)
        return float(np.nanmean(vals[:half])), float(np.nanmean(vals[len(self.mean) - half:]))


@dataclass
class NormProfile:
    norms: dict[str, np.ndarray]  # adapter name -> (num_blocks, probes)
    roles: tuple[str, ...] = ("o",)


@dataclass
class LinearityReport:
    s_grid: list[float]
    magnitudes: list[float]
    r: float
    arm: str
    per_probe: np.ndarray | None = None
    excluded: int = 0
    meta: dict = field(default_factory=dict)


def probe_inputs(model: ToyDiT, clips: np.ndarray, timestep: int, seed: int = 0):
    """Noised probe clips (pixel frames (B, V, F, F)) as model tokens at one timestep."""
    clips = np.asarray(clips)
    if clips.ndim != 4 or clips.shape[0] == 0:
        raise DimensionError(f"probe batch must be a non-empty (B, V, F, F) array, got {clips.shape}")
    steps = model.config.diffusion_steps
    if not 0 <= timestep < steps:
        raise DomainError(f"timestep {timestep} outside [0, {steps - 1}]")
    x0 = to_signal(clips).astype(np.float32 if model.dtype == "f32" else np.float64)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    t = np.full(x0.shape[0], timestep)
    xt = model.schedule.add_noise(x0, t, eps)
    return patchify(xt, model.config, x0[:, 0]), t


def layer_inputs(model: ToyDiT, tokens, timesteps) -> dict[str, np.ndarray]:
    """Inputs to every linear layer during one base-model forward pass."""
    capture: dict[str, np.ndarray] = {}
    model.forward(tokens, timesteps, capture=capture)
    return capture


def _contribution(adapter, lid: str, x: np.ndarray) -> np.ndarray:
    layer = adapter.layers[lid]
    return adapter.lam * ((x @ layer.A.data) @ layer.B.data)


def layerwise_cosine(model: ToyDiT, adapter_a, adapter_b, probe_clips, timestep: int | None = None,
                     roles: Sequence[str] = ("o",), seed: int = 0) -> SimilarityProfile:
    """Per block, cosine similarity of two adapters' output contributions.

    Both adapters see the same base-model activations, so the measure isolates
    the adapters themselves; contributions are flattened over tokens (and over
    ``roles`` when more than one attachment role is included).
    """
    if timestep is None:
        timestep = model.config.diffusion_steps // 2
    tokens, t = probe_inputs(model, probe_clips, timestep, seed)
    acts = layer_inputs(model, tokens, t)
    nb, b = model.config.num_blocks, tokens.batch
    samples = np.full((nb, b), np.nan)
    excluded = 0
    for i in range(nb):
        lids = [f"blocks.{i}.{r}" for r in roles]
        ca = np.concatenate([_contribution(adapter_a, l, acts[l]).reshape(b, -1) for l in lids], 1)
        cb = np.concatenate([_contribution(adapter_b, l, acts[l]).reshape(b, -1) for l in lids], 1)
        for j in range(b):
            if not ca[j].any() or not cb[j].any():
                excluded += 1
                continue
            samples[i, j] = cosine_similarity(ca[j], cb[j])
    if excluded:
        log.warning("layerwise_cosine: %d zero-activation samples excluded", excluded)
    with np.errstate(all="ignore"):
        mean = np.nanmean(samples, axis=1) if excluded < samples.size else np.full(nb, np.nan)
        std = np.nanstd(samples, axis=1) if excluded < samples.size else np.full(nb, np.nan)
    return SimilarityProfile(mean, std, samples, excluded, (adapter_a.name, adapter_b.name))


def norm_profile(model: ToyDiT, adapters: Sequence, probe_clips, timestep: int | None = None,
                 roles: Sequence[str] = ("o",), seed: int = 0) -> NormProfile:
    if timestep is None:
        timestep = model.config.diffusion_steps // 2
    tokens, t = probe_inputs(model, probe_clips, timestep, seed)
    acts = layer_inputs(model, tokens, t)
    nb, b = model.config.num_blocks, tokens.batch
    out = {}
    for ad in adapters:
        norms = np.zeros((nb, b))
        for i in range(nb):
            parts = [_contribution(ad, f"blocks.{i}.{r}", acts[f"blocks.{i}.{r}"]).reshape(b, -1)
                     for r in roles]
            norms[i] = np.linalg.norm(np.concatenate(parts, axis=1), axis=1)
        out[ad.name] = norms
    return NormProfile(out, tuple(roles))


# ---------------------------------------------------------------------------
# CSV export


def _write(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


PROFILE_COLUMNS = ["block_index", "metric", "mean", "std", "sample_id", "value"]


def fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def similarity_csv(profiles: Sequence[SimilarityProfile]) -> str:
    rows = []
    for prof in profiles:
        metric = f"cosine:{prof.names[0]}|{prof.names[1]}"
        for i in range(len(prof.mean)):
            rows.append([i, metric, fmt(float(prof.mean[i])), fmt(float(prof.std[i])), "", ""])
            for j, v in enumerate(prof.samples[i]):
                rows.append([i, metric, "", "", j, fmt(float(v))])
    return _write(rows, PROFILE_COLUMNS)


def norm_csv(profile: NormProfile) -> str:
    rows = []
    for name, norms in profile.norms.items():
        metric = f"norm:{name}"
        for i in range(norms.shape[0]):
            rows.append([i, metric, fmt(float(norms[i].mean())), fmt(float(norms[i].std())), "", ""])
            for j, v in enumerate(norms[i]):
                rows.append([i, metric, "", "", j, fmt(float(v))])
    return _write(rows, PROFILE_COLUMNS)


LINEARITY_COLUMNS = ["row_type", "arm", "S", "magnitude", "pearson_r"]


def linearity_csv(reports: Sequence[LinearityReport]) -> str:
    rows = []
    for rep in reports:
        for s, m in zip(rep.s_grid, rep.magnitudes):
            rows.append(["sample", rep.arm, fmt(s), fmt(m), ""])
    for rep in reports:
        rows.append(["summary", rep.arm, "", "", fmt(rep.r)])
    return _write(rows, LINEARITY_COLUMNS)


def trajectory_csv(frames) -> str:
    c = _as_path(frames)
    return _write([[i, fmt(x), fmt(y)] for i, (x, y) in enumerate(c)], ["frame", "x", "y"])


def line_chart_svg(series: dict[str, Sequence[float]], title: str = "",
                   width: int = 480, height: int = 280) -> str:
    """Minimal SVG polyline chart; x is the index within each series."""
    vals = [v for s in series.values() for v in s if not math.isnan(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    pad = 30
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="18" font-size="12">{title}</text>']
    for k, (name, s) in enumerate(series.items()):
        n = max(len(s) - 1, 1)
        pts = " ".join(
            f"{pad + i * (width - 2 * pad) / n:.1f},"
            f"{height - pad - (v - lo) / (hi - lo) * (height - 2 * pad):.1f}"
            for i, v in enumerate(s) if not math.isnan(v))
        color = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 100}" y="{20 + 14 * k}" font-size="11" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
