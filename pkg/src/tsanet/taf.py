"""Temporal alignment fusion.

Adjacent-frame features are warped onto the target frame with a modulated
deformable 3x3 convolution whose per-tap offsets and masks are predicted
from the concatenated (adjacent, target) features. The two aligned maps
(previous and next frame) are summed and passed through a 3x3 conv + relu,
independently at every pyramid level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, conv2d, grid_sample_bilinear, matmul, relu, sigmoid
from .encoder import NUM_LEVELS, WIDTHS, FeaturePyramid
from .errors import DimensionError
from .params import Params, he_conv, subtree, zero_conv

KERNEL = 3
TAPS = KERNEL * KERNEL
# regular grid displacement (dx, dy) of tap i = ky * 3 + kx
GRID_OFFSETS = np.array([(kx - 1, ky - 1) for ky in range(KERNEL) for kx in range(KERNEL)], dtype=np.float64)


@dataclass
class OffsetField:
    offsets: Tensor  # N x 2k x H x W, channels (dx_0, dy_0, dx_1, dy_1, ...)
    masks: Tensor  # N x k x H x W, sigmoid-activated

    def __post_init__(self):
        n, c2, h, w = self.offsets.shape
        if c2 != 2 * TAPS:
            raise DimensionError(f"offset field needs {2 * TAPS} offset channels, got {c2}")
        if self.masks.shape != (n, TAPS, h, w):
            raise DimensionError(f"mask shape {self.masks.shape} does not match offsets {self.offsets.shape}")


def init_taf_params(rng: np.random.Generator, widths=WIDTHS, dtype=np.float32) -> Params:
    params: Params = {}
    for level, c in enumerate(widths):
        # zero offset head: training starts from plain convolution with masks at 0.5
        params[f"{level}.offset.weight"], params[f"{level}.offset.bias"] = zero_conv(3 * TAPS, 2 * c, KERNEL, dtype)
        params[f"{level}.deform.weight"], params[f"{level}.deform.bias"] = he_conv(rng, c, c, KERNEL, dtype)
        params[f"{level}.aggregate.weight"], params[f"{level}.aggregate.bias"] = he_conv(rng, c, c, KERNEL, dtype)
    return params


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(f"{what}: axis {axis} differs ({x} vs {y})")
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def predict_offsets_masks(f_adj: Tensor, f_tgt: Tensor, params: Params) -> OffsetField:
    _same_shape(f_adj, f_tgt, "predict_offsets_masks")
    raw = conv2d(concat([f_adj, f_tgt], axis=1), params["offset.weight"], params["offset.bias"], pad=1)
    return OffsetField(offsets=raw[:, : 2 * TAPS], masks=sigmoid(raw[:, 2 * TAPS :]))


def _base_grid(h: int, w: int, dtype) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.empty((TAPS, h, w, 2), dtype=np.float64)
    grid[..., 0] = xs[None] + GRID_OFFSETS[:, 0, None, None]
    grid[..., 1] = ys[None] + GRID_OFFSETS[:, 1, None, None]
    return grid.astype(dtype)


def deformable_align(f_adj: Tensor, field: OffsetField, params: Params) -> Tensor:
    """Modulated deformable 3x3 convolution of ``f_adj`` (pad 1, stride 1)."""
    n, c, h, w = f_adj.shape
    if field.offsets.shape[0] != n or field.offsets.shape[2:] != (h, w):
        raise DimensionError(f"offset field {field.offsets.shape} does not match features {f_adj.shape}")
    weight, bias = params["deform.weight"], params["deform.bias"]
    cout = weight.shape[0]
    if weight.shape[1:] != (c, KERNEL, KERNEL):
        raise DimensionError(f"deformable weight {weight.shape} incompatible with {c} input channels")

    disp = field.offsets.reshape(n, TAPS, 2, h, w).transpose(0, 1, 3, 4, 2)
    points = (disp + Tensor(_base_grid(h, w, f_adj.dtype))).reshape(n, TAPS * h * w, 2)
    sampled = grid_sample_bilinear(f_adj, points).reshape(n, c, TAPS, h * w)
    modulated = sampled * field.masks.reshape(n, 1, TAPS, h * w)
    cols = modulated.reshape(n, c * TAPS, h * w)
    out = matmul(weight.reshape(cout, c * TAPS), cols) + bias.reshape(1, cout, 1)
    return out.reshape(n, cout, h, w)


def aggregate_aligned(a_prev: Tensor, a_next: Tensor, params: Params, target: Tensor | None = None) -> Tensor:
    """Sum the two aligned maps, then 3x3 conv + relu.

    ``target`` adds the target frame's own features to the sum when given.
    """
    _same_shape(a_prev, a_next, "aggregate_aligned")
    total = a_prev + a_next
    if target is not None:
        _same_shape(total, target, "aggregate_aligned target")
        total = total + target
    return relu(conv2d(total, params["aggregate.weight"], params["aggregate.bias"], pad=1))


def align_level(f_prev: Tensor, f_tgt: Tensor, f_next: Tensor, params: Params, target_residual: bool = False) -> Tensor:
    aligned = []
    for f_adj in (f_prev, f_next):
        field = predict_offsets_masks(f_adj, f_tgt, params)
        aligned.append(deformable_align(f_adj, field, params))
    return aggregate_aligned(aligned[0], aligned[1], params, f_tgt if target_residual else None)


def taf_forward(
    pyr_prev: FeaturePyramid,
    pyr_tgt: FeaturePyramid,
    pyr_next: FeaturePyramid,
    params: Params,
    target_residual: bool = False,
) -> FeaturePyramid:
    for level in range(NUM_LEVELS):
        _same_shape(pyr_prev[level], pyr_tgt[level], f"taf level {level} (previous vs target)")
        _same_shape(pyr_next[level], pyr_tgt[level], f"taf level {level} (next vs target)")
    return FeaturePyramid(
        [
            align_level(pyr_prev[l], pyr_tgt[l], pyr_next[l], subtree(params, str(l)), target_residual)
            for l in range(NUM_LEVELS)
        ]
    )
