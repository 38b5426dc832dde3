"""Dual-branch strided CNN producing 4-level feature pyramids.

Both branches (appearance on RGB frames, motion on 3-channel flow images)
share one architecture: two stride-2 conv+relu blocks reach stride 4 for
level 1, and each further level adds one stride-2 conv+relu block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, conv2d, relu
from .errors import DimensionError, ValidationError
from .params import Params, he_conv, subtree

WIDTHS = (16, 32, 64, 128)
BRANCHES = ("appearance", "motion")
NUM_LEVELS = 4


@dataclass
class FeaturePyramid:
    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ValidationError(f"a feature pyramid has {NUM_LEVELS} levels, got {len(self.levels)}")
        for lo, hi in zip(self.levels[:-1], self.levels[1:]):
            if hi.shape[2] * 2 != lo.shape[2] or hi.shape[3] * 2 != lo.shape[3]:
                raise DimensionError(
                    f"pyramid levels must halve spatially, got {lo.shape[2:]} then {hi.shape[2:]}"
                )

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [lv.shape for lv in self.levels]


def init_encoder_params(rng: np.random.Generator, widths=WIDTHS, dtype=np.float32) -> Params:
    params: Params = {}
    for branch in BRANCHES:
        chans = [3, widths[0], *widths]
        for b in range(NUM_LEVELS + 1):
            w, bias = he_conv(rng, chans[b + 1], chans[b], 3, dtype)
            params[f"{branch}.block{b}.weight"] = w
            params[f"{branch}.block{b}.bias"] = bias
    for level, c in enumerate(widths):
        w, bias = he_conv(rng, c, 2 * c, 1, dtype)
        params[f"fusion.{level}.weight"] = w
        params[f"fusion.{level}.bias"] = bias
    return params


def check_image(image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"encoder input must be N x 3 x H x W, got shape {image.shape}")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ValidationError(f"input height and width must be divisible by 32, got {h}x{w}")
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"input values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")


def extract_pyramid(image: Tensor, params: Params, branch: str = "appearance") -> FeaturePyramid:
    """Run one encoder branch; ``params`` is the full encoder dict."""
    if branch not in BRANCHES:
        raise ValidationError(f"branch must be one of {BRANCHES}, got {branch!r}")
    check_image(image)
    p = subtree(params, branch)
    x = relu(conv2d(image, p["block0.weight"], p["block0.bias"], stride=2, pad=1))
    levels = []
    for b in range(1, NUM_LEVELS + 1):
        x = relu(conv2d(x, p[f"block{b}.weight"], p[f"block{b}.bias"], stride=2, pad=1))
        levels.append(x)
    return FeaturePyramid(levels)


def fuse_appearance_motion(f_i: FeaturePyramid, f_o: FeaturePyramid, params: Params) -> FeaturePyramid:
    """Per level: channel concat, 1x1 conv back to the level width, relu."""
    fused = []
    for level, (a, m) in enumerate(zip(f_i.levels, f_o.levels)):
        if a.shape != m.shape:
            raise DimensionError(f"fusion level {level}: appearance {a.shape} vs motion {m.shape}")
        w = params[f"fusion.{level}.weight"]
        b = params[f"fusion.{level}.bias"]
        fused.append(relu(conv2d(concat([a, m], axis=1), w, b)))
    return FeaturePyramid(fused)


def encode_frame(image: Tensor, flow: Tensor, params: Params) -> FeaturePyramid:
    """Fused appearance+motion pyramid for one frame."""
    return fuse_appearance_motion(
        extract_pyramid(image, params, "appearance"),
        extract_pyramid(flow, params, "motion"),
        params,
    )


__all__ = [
    "BRANCHES",
    "FeaturePyramid",
    "NUM_LEVELS",
    "WIDTHS",
    "encode_frame",
    "extract_pyramid",
    "fuse_appearance_motion",
    "init_encoder_params",
]
