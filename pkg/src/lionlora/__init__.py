"""Scaling-token LoRA adapters for motion control on a toy video diffusion transformer."""

from .adapter import (
    AdapterSet,
    LoraAdapter,
    delta_weight,
    effective_weight,
    init_adapter,
    load_adapter_file,
    load_adapters,
    save_adapters,
)
from .clip import FrameSequence
from .diagnostics import (
    centroids,
    layerwise_cosine,
    mean_direction,
    motion_magnitude,
    norm_profile,
    pearson,
    trajectory_smoothness,
)
from .fusion import FusionPlan, NormReport, compute_alpha, fuse, norm_consistent_fuse, vanilla_fuse
from .model import ModelConfig, TokenSequence, ToyDiT, ddim_sample, patchify, unpatchify
from .multifuse import FusedContext, build_augmented_sequence, fused_forward, partitioned_attention_block
from .scaling import (
    ClipSampler,
    ScalingEmbedder,
    ScalingToken,
    augment_sequence,
    fourier_embed,
    make_scaling_token,
    sample_frame_indices,
)
from .tensor import Tape, Tensor, backward, cosine_similarity, frobenius_norm, grad_check

__version__ = "0.1.0"
