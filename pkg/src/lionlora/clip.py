"""Frame sequences: the carrier of measurable motion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FrameSequence:
    frames: np.ndarray  # (V, F, F), values in [0, 1]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[1] != self.frames.shape[2]:
            raise ValueError(f"frames must be (V, F, F), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> int:
        return self.frames.shape[1]
