from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError


@dataclass
class FrameSequence:
    """One video: RGB frames, 3-channel encoded flows and binary masks.

    Frames and flows are float64 arrays of shape (3, H, W) in [0, 1]; masks
    are uint8 arrays of shape (H, W) holding 0 or 1. ``max_mag`` is the flow
    magnitude that maps to a full-scale channel value.
    """

    frames: list[np.ndarray]
    flows: list[np.ndarray]
    masks: list[np.ndarray]
    name: str = "seq"
    max_mag: float = 8.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[1:]

    def validate(self) -> None:
        n = len(self.frames)
        if n == 0:
            raise ValidationError(f"sequence {self.name!r} has no frames")
        if len(self.flows) != n or len(self.masks) != n:
            raise ValidationError(
                f"sequence {self.name!r}: {n} frames, {len(self.flows)} flows, {len(self.masks)} masks"
            )
        h, w = self.frames[0].shape[1:]
        if h % 32 or w % 32:
            raise ValidationError(f"sequence {self.name!r}: resolution {h}x{w} is not divisible by 32")
        for i, (f, o, m) in enumerate(zip(self.frames, self.flows, self.masks)):
            if f.shape != (3, h, w) or o.shape != (3, h, w) or m.shape != (h, w):
                raise ValidationError(
                    f"sequence {self.name!r} frame {i}: shapes {f.shape}, {o.shape}, {m.shape} "
                    f"do not match {(3, h, w)}"
                )
            if not np.isin(m, (0, 1)).all():
                raise ValidationError(f"sequence {self.name!r} frame {i}: mask is not binary")


def window_indices(t: int, n: int) -> tuple[int, int, int]:
    """(t-1, t, t+1) clamped to the sequence."""
    return max(t - 1, 0), t, min(t + 1, n - 1)
