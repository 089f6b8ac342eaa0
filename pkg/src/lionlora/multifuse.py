"""Training-free fusion of k scaling-token adapters through partitioned attention.

The hidden sequence ``H`` (n rows) is shared. Branch i runs a block over
``[H; E_i]`` with only adapter i injected (rescaled to the common per-point norm
when the plan is norm-consistent). Afterwards the n shared rows are averaged
over branches and each branch keeps its own token row, so the reassembled
stream is ``[H_avg; E_1'; ...; E_k']`` with n + k rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterSet, ScaledAdapter
from .errors import DimensionError, EmptyFusionError, FusionError
from .fusion import FusionPlan, norm_scales
from .model import ToyDiT, ddim_loop, patchify, to_pixels, to_signal
from .scaling import ScalingEmbedder, ScalingToken
from .tensor import DTYPES, Tensor

AVERAGE_AFTER = ("block", "attention")


def _rows(token, batch: int) -> Tensor:
    """A scaling token as a (B, 1, d) tensor."""
    if isinstance(token, ScalingToken):
        token = token.E
    if token.ndim == 3:
        return token
    if token.shape[0] == 1 and batch != 1:
        return T.tile_rows(token, batch).reshape(batch, 1, token.shape[-1])
    return token.reshape(token.shape[0], 1, token.shape[-1])


def build_augmented_sequence(h: Tensor, tokens: Sequence) -> Tensor:
    """``[H; E_1; ...; E_k]`` for (n, d) or (B, n, d) ``h``."""
    if not tokens:
        raise EmptyFusionError("no scaling tokens")
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    rows = [_rows(t, h.shape[0]) for t in tokens]
    for r in rows:
        if r.shape[-1] != h.shape[-1]:
            raise DimensionError(f"token width {r.shape[-1]} != channel width {h.shape[-1]}")
    out = T.concat([h] + rows, axis=1)
    return out.reshape(out.shape[1:]) if squeeze else out


@dataclass
class FusedContext:
    plan: FusionPlan
    tokens: list  # k ScalingTokens, or (B, d) tensors
    average_after: str = "block"

    def __post_init__(self):
        if len(self.tokens) != self.plan.k:
            raise FusionError(f"{len(self.tokens)} scaling tokens for {self.plan.k} adapters")
        if self.average_after not in AVERAGE_AFTER:
            raise FusionError(f"average_after must be one of {AVERAGE_AFTER}")
        self._branches = None

    @property
    def k(self) -> int:
        return self.plan.k

    @classmethod
    def from_embedders(cls, plan: FusionPlan, embedders: Sequence[ScalingEmbedder],
                       values: Sequence[float], **kw) -> "FusedContext":
        from .scaling import make_scaling_token
        if len(embedders) != plan.k or len(values) != plan.k:
            raise FusionError("need one embedder and one scaling value per adapter")
        return cls(plan, [make_scaling_token(e, s) for e, s in zip(embedders, values)], **kw)

    def branches(self) -> list:
        """Per-branch adapter views: lam_i and, if norm-consistent, alpha / |dW_i| per point."""
        if self._branches is None:
            plan = self.plan
            if plan.mode == "norm_consistent":
                scales, _ = norm_scales(plan)
                self._branches = [
                    ScaledAdapter(ad, {lid: lam * scales[lid][i] for lid in plan.ids()})
                    for i, (ad, lam) in enumerate(zip(plan.adapters, plan.lambdas))]
            else:
                self._branches = [
                    ScaledAdapter(ad, {lid: lam for lid in plan.ids()})
                    for ad, lam in zip(plan.adapters, plan.lambdas)]
        return self._branches


def _split(x: Tensor, n: int) -> tuple[Tensor, Tensor]:
    return x[:, :n, :], x[:, n:n + 1, :]


def partitioned_attention_block(model: ToyDiT, h_shared: Tensor, tokens: Sequence[Tensor],
                                branches: Sequence, block: int, average_after: str = "block"
                                ) -> tuple[Tensor, list[Tensor]]:
    """One block over k partitioned subspaces.

    ``h_shared`` is (B, n, d); ``tokens`` are k (B, 1, d) rows. Returns the
    averaged shared rows and each branch's updated token row.
    """
    if not branches:
        raise EmptyFusionError("partitioned block with no branches")
    if len(tokens) != len(branches):
        raise FusionError(f"{len(tokens)} tokens for {len(branches)} branches")
    n = h_shared.shape[1]
    for tok in tokens:
        if tok.shape[-1] != h_shared.shape[-1]:
            raise DimensionError(f"token width {tok.shape[-1]} != channel width {h_shared.shape[-1]}")

    if average_after == "block":
        outs = [model.block(T.concat([h_shared, tok], axis=1), block, ad)
                for tok, ad in zip(tokens, branches)]
        parts = [_split(o, n) for o in outs]
        return T.stack_mean([p[0] for p in parts]), [p[1] for p in parts]

    mids = []
    for tok, ad in zip(tokens, branches):
        x = T.concat([h_shared, tok], axis=1)
        mids.append(x + model.attention(x, block, ad))
    parts = [_split(m, n) for m in mids]
    h_mid = T.stack_mean([p[0] for p in parts])
    outs = []
    for (_, tok), ad in zip(parts, branches):
        x = T.concat([h_mid, tok], axis=1)
        outs.append(x + model.mlp(x, block, ad))
    parts = [_split(o, n) for o in outs]
    return T.stack_mean([p[0] for p in parts]), [p[1] for p in parts]


def fused_hidden(model: ToyDiT, tokens_in, timesteps, context: FusedContext) -> Tensor:
    """Reassembled (B, n + k, d) stream after the last block."""
    for ad in context.plan.adapters:
        model.check_adapters(ad)
    h = model.embed(tokens_in, timesteps)
    b = h.shape[0]
    toks = [_rows(t, b) for t in context.tokens]
    branches = context.branches()
    for i in range(model.config.num_blocks):
        h, toks = partitioned_attention_block(model, h, toks, branches, i, context.average_after)
    return T.concat([h] + toks, axis=1)


def fused_forward(model: ToyDiT, tokens_in, timesteps, context: FusedContext) -> Tensor:
    """Noise prediction from the fused stream."""
    return model.head(fused_hidden(model, tokens_in, timesteps, context))


def fused_sample_batch(model: ToyDiT, conditions: np.ndarray, context: FusedContext,
                       steps: int = 50, seed: int = 0) -> np.ndarray:
    cfg = model.config
    conditions = np.asarray(conditions)
    cond_signal = to_signal(conditions)
    b = conditions.shape[0]

    def predict(x, t):
        return fused_forward(model, patchify(x, cfg, cond_signal), np.full(b, t), context).data

    x0 = ddim_loop(model.schedule, predict, (b, cfg.frames, cfg.frame_size, cfg.frame_size),
                   steps, seed, DTYPES[model.dtype])
    return to_pixels(x0)
