"""Weight-space fusion of k adapters.

Vanilla fusion sums ``lam_i * dW_i`` per attachment point. Norm-consistent fusion
first rescales every ``dW_i`` at a point to a shared Frobenius norm ``alpha`` (by
default the mean of the k norms at that point), then sums.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import AdapterSet, DenseDelta
from .errors import DegenerateAdapterError, EmptyFusionError, FusionError
from .tensor import Tensor

MODES = ("vanilla", "norm_consistent")


@dataclass
class FusionPlan:
    adapters: list[AdapterSet]
    lambdas: list[float] | None = None
    mode: str = "norm_consistent"
    alpha_override: float | None = None

    def __post_init__(self):
        if not self.adapters:
            raise EmptyFusionError("a fusion plan needs at least one adapter")
        if self.lambdas is None:
            self.lambdas = [1.0] * len(self.adapters)
        if len(self.lambdas) != len(self.adapters):
            raise FusionError(f"{len(self.lambdas)} lambdas for {len(self.adapters)} adapters")
        if self.mode not in MODES:
            raise FusionError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        ref = set(self.adapters[0].ids())
        for ad in self.adapters[1:]:
            ids = set(ad.ids())
            if ids != ref:
                raise FusionError(
                    f"attachment ids differ between {self.adapters[0].name!r} and {ad.name!r}: "
                    f"only in first {sorted(ref - ids)}, only in second {sorted(ids - ref)}")

    @property
    def k(self) -> int:
        return len(self.adapters)

    def ids(self) -> list[str]:
        return self.adapters[0].ids()


@dataclass
class NormReport:
    names: list[str]
    norms_before: dict[str, list[float]] = field(default_factory=dict)
    alpha: dict[str, float] = field(default_factory=dict)
    scale: dict[str, list[float]] = field(default_factory=dict)
    norms_after: dict[str, list[float]] = field(default_factory=dict)

    COLUMNS = ("attachment_id", "adapter_name", "norm_before", "alpha", "scale_factor", "norm_after")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for lid in self.norms_before:
            for i, name in enumerate(self.names):
                w.writerow([lid, name, f"{self.norms_before[lid][i]:.9g}", f"{self.alpha[lid]:.9g}",
                            f"{self.scale[lid][i]:.9g}", f"{self.norms_after[lid][i]:.9g}"])
        return buf.getvalue()


def compute_alpha(norms: Sequence[float], alpha_override: float | None = None) -> float:
    norms = [float(n) for n in norms]
    if not norms:
        raise EmptyFusionError("no norms to average")
    if any(n <= 0 for n in norms):
        raise DegenerateAdapterError(f"zero-norm adapter delta among norms {norms}")
    if alpha_override is not None:
        return float(alpha_override)
    return math.fsum(norms) / len(norms)


def vanilla_fuse(plan: FusionPlan) -> DenseDelta:
    """Per point, ``sum_i lam_i * dW_i``."""
    deltas = {}
    for lid in plan.ids():
        acc = None
        for ad, lam in zip(plan.adapters, plan.lambdas):
            layer = ad.layers[lid]
            term = lam * ad.lam * (layer.A.data @ layer.B.data)
            acc = term if acc is None else acc + term
        deltas[lid] = Tensor(acc)
    return DenseDelta(deltas, name="+".join(a.name for a in plan.adapters))


def norm_scales(plan: FusionPlan) -> tuple[dict[str, list[float]], NormReport]:
    """Per point scale factors ``alpha / |dW_i|`` and the accompanying report."""
    report = NormReport([a.name for a in plan.adapters])
    scales = {}
    for lid in plan.ids():
        deltas = [ad.lam * (ad.layers[lid].A.data.astype(np.float64) @ ad.layers[lid].B.data)
                  for ad in plan.adapters]
        norms = [float(np.sqrt((d * d).sum())) for d in deltas]
        if any(n == 0 for n in norms):
            zero = [a.name for a, n in zip(plan.adapters, norms) if n == 0]
            raise DegenerateAdapterError(f"adapter(s) {zero} have a zero delta at {lid}")
        alpha = compute_alpha(norms, plan.alpha_override)
        factors = [alpha / n for n in norms]
        scales[lid] = factors
        report.norms_before[lid] = norms
        report.alpha[lid] = alpha
        report.scale[lid] = factors
        report.norms_after[lid] = [float(np.sqrt(((f * d) ** 2).sum()))
                                   for f, d in zip(factors, deltas)]
    return scales, report


def normalized_deltas(plan: FusionPlan) -> tuple[list[dict[str, Tensor]], NormReport]:
    """The rescaled per-adapter deltas, each with norm alpha at every point."""
    scales, report = norm_scales(plan)
    out = []
    for i, ad in enumerate(plan.adapters):
        out.append({lid: Tensor(scales[lid][i] * ad.lam * (ad.layers[lid].A.data @ ad.layers[lid].B.data))
                    for lid in plan.ids()})
    return out, report


def norm_consistent_fuse(plan: FusionPlan) -> tuple[DenseDelta, NormReport]:
    """Per point, ``sum_i lam_i * (alpha / |dW_i|) * dW_i``."""
    if plan.mode != "norm_consistent":
        raise FusionError(f"plan mode is {plan.mode!r}, not 'norm_consistent'")
    per_adapter, report = normalized_deltas(plan)
    fused = {}
    for lid in plan.ids():
        acc = None
        for deltas, lam in zip(per_adapter, plan.lambdas):
            term = lam * deltas[lid].data
            acc = term if acc is None else acc + term
        fused[lid] = Tensor(acc)
    return DenseDelta(fused, name="+".join(a.name for a in plan.adapters)), report


def fuse(plan: FusionPlan) -> tuple[DenseDelta, NormReport | None]:
    if plan.mode == "vanilla":
        return vanilla_fuse(plan), None
    return norm_consistent_fuse(plan)
