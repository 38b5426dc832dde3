"""3-channel flow image encoding.

channel 0: dx / max_mag mapped from [-1, 1] to [0, 1]
channel 1: dy, same mapping
channel 2: |(dx, dy)| / max_mag clamped to [0, 1]
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError


def flow_to_rgb(dx: np.ndarray, dy: np.ndarray, max_mag: float) -> np.ndarray:
    if max_mag <= 0:
        raise ValidationError(f"max_mag must be positive, got {max_mag}")
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    return np.stack(
        [
            np.clip(dx / max_mag, -1.0, 1.0) / 2.0 + 0.5,
            np.clip(dy / max_mag, -1.0, 1.0) / 2.0 + 0.5,
            np.clip(np.hypot(dx, dy) / max_mag, 0.0, 1.0),
        ]
    )


def rgb_to_flow(rgb: np.ndarray, max_mag: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`flow_to_rgb` for displacements inside the clamp range."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return (rgb[0] - 0.5) * 2.0 * max_mag, (rgb[1] - 0.5) * 2.0 * max_mag
