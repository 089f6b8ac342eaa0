"""Low-rank adapters attached to named linear layers.

An adapter at one attachment point holds ``A`` (d_in x r) and ``B`` (r x d_out);
its weight delta is ``A @ B`` and the adapted weight is ``W_base + lam * A @ B``.
The forward pass never materialises the delta: the contribution to a linear
layer's output is computed as ``lam * (x @ A) @ B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .errors import AttachmentError, ConfigError, DimensionError, WeightFileError
from .tensor import DTYPES, Tensor, matmul, mul, scale_rows
from .weightfile import Section, read_weight_file, write_weight_file

if TYPE_CHECKING:
    from .model import ModelConfig
    from .scaling import ScalingEmbedder

INIT_STD = 0.02
DEFAULT_RANK = 8


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise DimensionError(f"incompatible LoRA factors {self.A.shape} and {self.B.shape}")
        if self.A.dtype != self.B.dtype:
            raise DimensionError("LoRA factors must share a dtype")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]


def delta_weight(adapter: LoraAdapter) -> Tensor:
    return matmul(adapter.A, adapter.B)


def effective_weight(w_base: Tensor, adapter: LoraAdapter, lam: float = 1.0) -> Tensor:
    if tuple(w_base.shape) != adapter.shape:
        raise AttachmentError(
            f"base weight {w_base.shape} does not match adapter delta {adapter.shape}")
    return w_base + mul(delta_weight(adapter), lam)


@dataclass
class AdapterSet:
    """One trained adapter: a LoRA pair for every attachment point of a model."""

    name: str
    layers: dict[str, LoraAdapter]
    lam: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return next(iter(self.layers.values())).rank

    @property
    def dtype(self) -> str:
        return next(iter(self.layers.values())).A.dtype

    def ids(self) -> list[str]:
        return list(self.layers)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers.values():
            out += [layer.A, layer.B]
        return out

    def deltas(self) -> dict[str, np.ndarray]:
        return {lid: layer.A.data @ layer.B.data for lid, layer in self.layers.items()}

    def contribution(self, lid: str, x: Tensor) -> Tensor | None:
        layer = self.layers.get(lid)
        if layer is None:
            return None
        out = matmul(matmul(x, layer.A), layer.B)
        return out if self.lam == 1.0 else mul(out, self.lam)

    def check_against(self, config: "ModelConfig") -> None:
        points = config.attachment_points()
        missing = sorted(set(points) - set(self.layers))
        unknown = sorted(set(self.layers) - set(points))
        if missing or unknown:
            raise AttachmentError(
                f"adapter {self.name!r} does not fit the model: missing ids {missing}, "
                f"unknown ids {unknown}")
        for lid, layer in self.layers.items():
            if layer.shape != points[lid]:
                raise AttachmentError(
                    f"{lid}: adapter shape {layer.shape} != layer shape {points[lid]}")

    def copy(self) -> "AdapterSet":
        layers = {lid: LoraAdapter(Tensor(l.A.data.copy()), Tensor(l.B.data.copy()))
                  for lid, l in self.layers.items()}
        return AdapterSet(self.name, layers, self.lam, dict(self.metadata))

    def to(self, dtype: str) -> "AdapterSet":
        layers = {lid: LoraAdapter(Tensor(l.A.data, dtype=dtype), Tensor(l.B.data, dtype=dtype))
                  for lid, l in self.layers.items()}
        return AdapterSet(self.name, layers, self.lam, dict(self.metadata))


class ScaledAdapter:
    """An adapter set viewed with extra per-point and/or per-sample multipliers.

    ``point_scale`` carries the norm-consistency factors of a fused branch;
    ``row_factors`` carries a per-sample injection strength (the adapter-scale
    arm, where lambda equals the scaling value of each sample).
    """

    def __init__(self, base: AdapterSet, point_scale: Mapping[str, float] | None = None,
                 row_factors=None):
        self.base = base
        self.name = base.name
        self.point_scale = dict(point_scale or {})
        self.row_factors = None if row_factors is None else np.asarray(row_factors)

    def ids(self) -> list[str]:
        return self.base.ids()

    def check_against(self, config) -> None:
        self.base.check_against(config)

    def contribution(self, lid: str, x: Tensor) -> Tensor | None:
        layer = self.base.layers.get(lid)
        if layer is None:
            return None
        out = matmul(matmul(x, layer.A), layer.B)
        factor = self.base.lam * self.point_scale.get(lid, 1.0)
        if factor != 1.0:
            out = mul(out, factor)
        if self.row_factors is not None:
            out = scale_rows(out, self.row_factors)
        return out


class DenseDelta:
    """Materialised per-point weight deltas, e.g. the result of a weight-space fusion."""

    def __init__(self, deltas: Mapping[str, Tensor], name: str = "fused"):
        self.deltas = dict(deltas)
        self.name = name

    def ids(self) -> list[str]:
        return list(self.deltas)

    def check_against(self, config) -> None:
        points = config.attachment_points()
        unknown = sorted(set(self.deltas) - set(points))
        if unknown:
            raise AttachmentError(f"unknown attachment ids {unknown}")

    def contribution(self, lid: str, x: Tensor) -> Tensor | None:
        d = self.deltas.get(lid)
        return None if d is None else matmul(x, d)


def init_adapter(config: "ModelConfig", rank: int = DEFAULT_RANK, seed: int = 0,
                 name: str = "adapter", lam: float = 1.0, dtype: str = "f32") -> AdapterSet:
    """Gaussian ``A`` (std 0.02) and zero ``B``, so the initial delta is exactly zero."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    layers = {}
    for lid, (d_in, d_out) in config.attachment_points().items():
        if rank > min(d_in, d_out):
            raise ConfigError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)} at {lid}")
        a = rng.normal(0.0, INIT_STD, size=(d_in, rank)).astype(DTYPES[dtype])
        b = np.zeros((rank, d_out), dtype=DTYPES[dtype])
        layers[lid] = LoraAdapter(Tensor(a), Tensor(b))
    return AdapterSet(name, layers, lam, {"rank": rank, "init_seed": seed})


# ---------------------------------------------------------------------------
# serialisation


def adapter_sections(adapters: AdapterSet, embedder: "ScalingEmbedder | None" = None) -> list[Section]:
    tensors = {}
    for lid, layer in adapters.layers.items():
        tensors[f"{lid}.A"] = layer.A.data
        tensors[f"{lid}.B"] = layer.B.data
    meta = {"name": adapters.name, "rank": adapters.rank, "lambda": adapters.lam,
            "ids": adapters.ids(), "metadata": adapters.metadata}
    sections = [Section(f"adapter/{adapters.name}", tensors, meta)]
    if embedder is not None:
        sections.append(embedder.to_section())
    return sections


def save_adapters(adapters: AdapterSet, path, embedder: "ScalingEmbedder | None" = None) -> None:
    write_weight_file(path, adapter_sections(adapters, embedder))


def load_adapter_file(path, config: "ModelConfig | None" = None
                      ) -> tuple[AdapterSet, "ScalingEmbedder | None"]:
    """Read an adapter (and its scaling embedder, if stored) from a LIONWT file.

    Everything is validated before anything is returned, so a failure never
    leaves a partially loaded adapter behind.
    """
    from .scaling import ScalingEmbedder

    sections = read_weight_file(path)
    adapter_secs = [s for name, s in sections.items() if name.startswith("adapter/")]
    if len(adapter_secs) != 1:
        raise WeightFileError(f"expected one adapter section, found {len(adapter_secs)}")
    sec = adapter_secs[0]
    layers = {}
    for lid in sec.meta["ids"]:
        try:
            a, b = sec.tensors[f"{lid}.A"], sec.tensors[f"{lid}.B"]
        except KeyError as exc:
            raise WeightFileError(f"adapter section lacks tensor {exc}") from exc
        layers[lid] = LoraAdapter(Tensor(a), Tensor(b))
    adapters = AdapterSet(sec.meta["name"], layers, float(sec.meta["lambda"]),
                          dict(sec.meta.get("metadata", {})))
    if config is not None:
        adapters.check_against(config)
    embedder = None
    scaling = sections.get(f"scaling/{adapters.name}")
    if scaling is not None:
        embedder = ScalingEmbedder.from_section(scaling)
    return adapters, embedder


def load_adapters(path, config: "ModelConfig | None" = None) -> AdapterSet:
    return load_adapter_file(path, config)[0]
