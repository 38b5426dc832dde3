"""Full segmentation network: encoder -> temporal alignment -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, conv2d, resize_bilinear
from .encoder import WIDTHS, FeaturePyramid, encode_frame, init_encoder_params
from .errors import ValidationError
from .params import Params, he_conv, prefixed, subtree
from .sad import HIDDEN, L_FREQ, init_sad_params, predict_mask
from .taf import init_taf_params, taf_forward


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, int, int, int] = WIDTHS
    hidden: int = HIDDEN
    l_freq: int = L_FREQ
    taf_enabled: bool = True
    sad_enabled: bool = True
    target_residual: bool = False
    rescale_relative: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in values.items() if k in known}
        if "widths" in kwargs:
            kwargs["widths"] = tuple(int(x) for x in kwargs["widths"])
        return cls(**kwargs)


class Window(NamedTuple):
    """Frames and flows for (t-1, t, t+1), each 1 x 3 x H x W."""

    frames: tuple[Tensor, Tensor, Tensor]
    flows: tuple[Tensor, Tensor, Tensor]


def init_bilinear_params(rng: np.random.Generator, widths=WIDTHS, dtype=np.float32) -> Params:
    params: Params = {}
    for level, c in enumerate(widths):
        params[f"{level}.weight"], params[f"{level}.bias"] = he_conv(rng, 2, c, 1, dtype)
    return params


def bilinear_decode(aligned: FeaturePyramid, out_h: int, out_w: int, params: Params) -> Tensor:
    """Ablation decoder: per-level 1x1 conv to 2 logits, bilinear upsample, sum."""
    total = None
    for level, feat in enumerate(aligned.levels):
        logits = conv2d(feat, params[f"{level}.weight"], params[f"{level}.bias"])
        up = resize_bilinear(logits, out_h, out_w)
        total = up if total is None else total + up
    return total


class TSANet:
    """Parameter container plus the forward pass for one frame window."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cfg = self.config
        params: Params = {}
        params.update(prefixed("encoder", init_encoder_params(rng, cfg.widths, dtype)))
        if cfg.taf_enabled:
            params.update(prefixed("taf", init_taf_params(rng, cfg.widths, dtype)))
        if cfg.sad_enabled:
            params.update(prefixed("sad", init_sad_params(rng, cfg.widths, cfg.hidden, cfg.l_freq, dtype)))
        else:
            params.update(prefixed("bilinear", init_bilinear_params(rng, cfg.widths, dtype)))
        self.params = params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValidationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValidationError(f"parameter {name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(self.dtype, copy=True)
            p.zero_grad()

    def encode_window(self, window: Window) -> FeaturePyramid:
        """Aligned pyramid for the centre frame of the window."""
        enc = subtree(self.params, "encoder")
        shape = window.frames[1].shape
        for t in list(window.frames) + list(window.flows):
            if t.shape != shape:
                raise ValidationError(f"window tensors must share one resolution, got {t.shape} vs {shape}")
        if not self.config.taf_enabled:
            return encode_frame(window.frames[1], window.flows[1], enc)
        pyramids = [encode_frame(f, o, enc) for f, o in zip(window.frames, window.flows)]
        return taf_forward(*pyramids, subtree(self.params, "taf"), self.config.target_residual)

    def decode(self, aligned: FeaturePyramid, out_h: int, out_w: int) -> Tensor:
        cfg = self.config
        if cfg.sad_enabled:
            return predict_mask(
                aligned, out_h, out_w, subtree(self.params, "sad"), cfg.l_freq, cfg.rescale_relative
            )
        return bilinear_decode(aligned, out_h, out_w, subtree(self.params, "bilinear"))

    def forward(self, window: Window, out_size: tuple[int, int] | None = None) -> Tensor:
        if out_size is None:
            out_size = window.frames[1].shape[2:]
        return self.decode(self.encode_window(window), *out_size)


def forward_segment(model: TSANet, window: Window, out_size: tuple[int, int] | None = None) -> Tensor:
    """Logits 1 x 2 x H x W for the centre frame of ``window``."""
    return model.forward(window, out_size)
