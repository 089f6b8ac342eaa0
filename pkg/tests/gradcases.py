"""Gradient-check cases shared by the unit and acceptance suites."""

import numpy as np

from lionlora import tensor as T
from lionlora.adapter import AdapterSet, LoraAdapter
from lionlora.model import ModelConfig, ToyDiT, patchify
from lionlora.scaling import ScalingEmbedder
from lionlora.tensor import Tensor

# V=1 frame of 4x4 in 2x2 patches: 4 patch rows + 1 condition row
GRAD_DIT = ModelConfig(num_blocks=2, channels=8, heads=2, frames=1, frame_size=4, patch_size=2,
                       diffusion_steps=20)


def _r(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


def primitive_cases():
    """name -> (f, x): each f maps x (f64) to a scalar through one primitive."""
    w = Tensor(_r(1, 3, 4))
    other = Tensor(_r(2, 3, 4))
    batched_b = Tensor(_r(3, 2, 4, 2))
    mask = Tensor(_r(4, 3, 4))
    cases = {
        "add": (lambda x: T.tsum(T.mul(T.add(x, other), mask)), Tensor(_r(5, 3, 4))),
        "add_bias": (lambda x: T.tsum(T.mul(T.add(w, x), mask)), Tensor(_r(6, 4))),
        "sub": (lambda x: T.tsum(T.mul(T.sub(other, x), mask)), Tensor(_r(7, 3, 4))),
        "neg": (lambda x: T.tsum(T.mul(T.neg(x), mask)), Tensor(_r(8, 3, 4))),
        "mul": (lambda x: T.tsum(T.mul(x, other)), Tensor(_r(9, 3, 4))),
        "mul_scalar": (lambda x: T.tsum(T.mul(T.mul(x, 2.5), mask)), Tensor(_r(10, 3, 4))),
        "scale_rows": (lambda x: T.tsum(T.mul(T.scale_rows(x, [0.5, -2.0, 3.0]), mask)),
                       Tensor(_r(11, 3, 4))),
        "matmul_left": (lambda x: T.tsum(T.square(T.matmul(x, w))), Tensor(_r(12, 2, 3))),
        "matmul_right": (lambda x: T.tsum(T.square(T.matmul(Tensor(_r(13, 2, 3)), x))),
                         Tensor(_r(14, 3, 4))),
        "matmul_batched": (lambda x: T.tsum(T.square(T.matmul(x, batched_b))),
                           Tensor(_r(15, 2, 3, 4))),
        "reshape": (lambda x: T.tsum(T.mul(T.reshape(x, (3, 4)), mask)), Tensor(_r(16, 2, 6))),
        "transpose": (lambda x: T.tsum(T.mul(T.transpose(x), mask)), Tensor(_r(17, 4, 3))),
        "take": (lambda x: T.tsum(T.square(T.take(x, (slice(None), slice(1, 3))))),
                 Tensor(_r(18, 3, 4))),
        "concat": (lambda x: T.tsum(T.square(T.concat([x, other, x], axis=0))),
                   Tensor(_r(19, 3, 4))),
        "stack_mean": (lambda x: T.tsum(T.square(T.stack_mean([x, other, T.square(x)]))),
                       Tensor(_r(20, 3, 4))),
        "tile_rows": (lambda x: T.tsum(T.square(T.tile_rows(x, 3))), Tensor(_r(21, 2, 4))),
        "tsum_axis": (lambda x: T.tsum(T.square(T.tsum(x, axis=1))), Tensor(_r(22, 3, 4))),
        "tmean": (lambda x: T.square(T.tmean(x)), Tensor(_r(23, 3, 4))),
        "exp": (lambda x: T.tsum(T.mul(T.exp(x), mask)), Tensor(_r(24, 3, 4) * 0.5)),
        "tanh": (lambda x: T.tsum(T.mul(T.tanh(x), mask)), Tensor(_r(25, 3, 4))),
        "square": (lambda x: T.tsum(T.mul(T.square(x), mask)), Tensor(_r(26, 3, 4))),
        "silu": (lambda x: T.tsum(T.mul(T.silu(x), mask)), Tensor(_r(27, 3, 4))),
        "gelu": (lambda x: T.tsum(T.mul(T.gelu(x), mask)), Tensor(_r(28, 3, 4))),
        "softmax_rows": (lambda x: T.tsum(T.mul(T.softmax_rows(x), mask)), Tensor(_r(29, 3, 4))),
        "layer_norm": (lambda x: T.tsum(T.mul(T.layer_norm(x), mask)), Tensor(_r(30, 3, 4))),
        "mse": (lambda x: T.mse(x, other), Tensor(_r(31, 3, 4))),
        "frobenius_norm": (lambda x: T.frobenius_norm(x), Tensor(_r(32, 3, 4))),
    }
    return cases


def toy_dit_cases():
    """name -> (f, x) over every parameter of a 2-block d=8, n=5 model with an adapter and token."""
    model = ToyDiT(GRAD_DIT, seed=1, dtype="f64")
    rng = np.random.default_rng(2)
    layers = {lid: LoraAdapter(Tensor(rng.normal(0, 0.3, (di, 2))), Tensor(rng.normal(0, 0.3, (2, do))))
              for lid, (di, do) in GRAD_DIT.attachment_points().items()}
    adapter = AdapterSet("grad", layers)
    embedder = ScalingEmbedder.create("grad", GRAD_DIT.channels, 2, seed=3, dtype="f64")
    frames = rng.normal(size=(2, 1, 4, 4))
    tokens = patchify(frames, GRAD_DIT, rng.normal(size=(2, 4, 4)))
    assert tokens.n == 5
    target = Tensor(rng.normal(size=(2, 1, 4, 4)))
    t = np.array([3, 15])

    def base_loss(_):
        return T.mse(model.forward(tokens, t), target)

    def adapted_loss(_):
        scaling = embedder.embed_batch([0.3, 0.8])
        return T.mse(model.forward(tokens, t, adapter, scaling), target)

    cases = {f"base:{k}": (base_loss, v) for k, v in model.params.items()}
    cases.update({f"adapted:{k}": (adapted_loss, v) for k, v in model.params.items()})
    for lid, layer in layers.items():
        cases[f"lora:{lid}.A"] = (adapted_loss, layer.A)
        cases[f"lora:{lid}.B"] = (adapted_loss, layer.B)
    cases["scaling:projection"] = (adapted_loss, embedder.projection)
    cases["scaling:bias"] = (adapted_loss, embedder.bias)
    return cases
