"""Synthetic moving-object videos with exact masks and flow.

A single foreground object translates by whole-pixel steps over a smooth
static background, bouncing off the borders. Static distractors are drawn
in the object's own colour and texture, so appearance alone does not
identify the target; its motion does. With ``occluders`` enabled, some
interior frames carry a transient second mover of the same family that
overlaps the target at a random depth order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ValidationError
from .flow import flow_to_rgb
from .sequence import FrameSequence

SHAPES = ("disk", "rectangle", "blob")


@dataclass(frozen=True)
class SyntheticConfig:
    resolution: int = 64
    n_frames: int = 20
    shape: str = "disk"
    velocity_range: tuple[int, int] = (1, 3)  # per-axis step bounds, px/frame
    radius_range: tuple[float, float] = (9.0, 14.0)
    texture_seed: int | None = None
    occluders: bool = False
    distractors: int = 2
    occlusion_rate: float = 0.35
    max_mag: float = 4.0

    def validate(self) -> None:
        if self.resolution < 32 or self.resolution % 32:
            raise ValidationError(f"resolution must be a positive multiple of 32, got {self.resolution}")
        if self.n_frames < 3:
            raise ValidationError(f"n_frames must be >= 3, got {self.n_frames}")
        if self.shape not in SHAPES:
            raise ValidationError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        vmin, vmax = self.velocity_range
        if not 0 <= vmin <= vmax:
            raise ValidationError(f"velocity_range must satisfy 0 <= min <= max, got {self.velocity_range}")
        rmin, rmax = self.radius_range
        if not 0 < rmin <= rmax:
            raise ValidationError(f"radius_range must satisfy 0 < min <= max, got {self.radius_range}")
        # room for the object plus one step on both sides of the free interval
        if 2 * (_extent(rmax, self.shape) + 1) + 2 * vmax + 1 > self.resolution:
            raise ValidationError(
                f"objects of radius {rmax} moving {vmax} px/frame do not fit in {self.resolution} px"
            )
        if self.distractors < 0:
            raise ValidationError(f"distractors must be >= 0, got {self.distractors}")
        if not 0 <= self.occlusion_rate <= 1:
            raise ValidationError(f"occlusion_rate must lie in [0, 1], got {self.occlusion_rate}")
        if self.max_mag <= 0:
            raise ValidationError(f"max_mag must be positive, got {self.max_mag}")

    def to_dict(self) -> dict:
        return asdict(self)


def _extent(radius: float, shape: str) -> float:
    return radius * 1.2 if shape == "blob" else radius


class _Sprite:
    """A textured shape in its own coordinate frame."""

    def __init__(self, rng: np.random.Generator, shape: str, radius_range, like: "_Sprite | None" = None):
        self.shape = shape
        self.radius = float(rng.uniform(*radius_range))
        if shape == "rectangle":
            self.half = rng.uniform(0.6, 1.0, 2) * self.radius
        elif shape == "blob":
            self.lobes = int(rng.integers(2, 5))
            self.phase = float(rng.uniform(0, 2 * np.pi))
        self.color = rng.uniform(0.1, 0.9, 3)
        self.wave = rng.normal(0, 0.35, 2)
        self.wave_phase = float(rng.uniform(0, 2 * np.pi))
        if like is not None:
            self.color, self.wave, self.wave_phase = like.color, like.wave, like.wave_phase

    @property
    def extent(self) -> float:
        return _extent(self.radius, self.shape)

    def inside(self, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        if self.shape == "disk":
            return dx**2 + dy**2 <= self.radius**2
        if self.shape == "rectangle":
            return (np.abs(dx) <= self.half[0]) & (np.abs(dy) <= self.half[1])
        theta = np.arctan2(dy, dx)
        boundary = self.radius * (1.0 + 0.2 * np.sin(self.lobes * theta + self.phase))
        return np.hypot(dx, dy) <= boundary

    def colour(self, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        shade = 0.12 * np.sin(self.wave[0] * dx + self.wave[1] * dy + self.wave_phase)
        return np.clip(self.color[:, None, None] + shade[None], 0.0, 1.0)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for ch in range(3):
        acc = np.full((size, size), rng.uniform(0.3, 0.7))
        for _ in range(4):
            fx, fy = rng.uniform(-4, 4, 2)
            acc += rng.uniform(0.03, 0.1) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        img[ch] = acc
    return np.clip(img, 0.0, 1.0)


def _velocity(rng: np.random.Generator, vrange) -> np.ndarray:
    vmin, vmax = vrange
    if vmax == 0:
        return np.zeros(2, dtype=np.int64)
    while True:
        v = rng.integers(-vmax, vmax + 1, 2)
        if np.abs(v).max() >= max(vmin, 1):
            return v


def _trajectory(rng, cfg: SyntheticConfig, sprite: _Sprite) -> np.ndarray:
    lo = int(np.ceil(sprite.extent)) + 1
    hi = cfg.resolution - 2 - lo
    pos = rng.integers(lo, hi + 1, 2)
    vel = _velocity(rng, cfg.velocity_range)
    centres = [pos.copy()]
    for _ in range(cfg.n_frames - 1):
        nxt = pos + vel
        for axis in range(2):
            if nxt[axis] < lo or nxt[axis] > hi:
                vel[axis] = -vel[axis]
        pos = np.clip(pos + vel, lo, hi)
        centres.append(pos.copy())
    return np.array(centres)


def _event_frames(rng: np.random.Generator, n: int, rate: float) -> list[int]:
    events: list[int] = []
    for t in range(1, n - 1):
        if (not events or events[-1] < t - 1) and rng.random() < rate:
            events.append(t)
    if not events and n >= 3:
        events.append(n // 2)
    return events


def generate_synthetic_sequence(cfg: SyntheticConfig, seed, name: str | None = None) -> FrameSequence:
    """Render one sequence; deterministic in (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size, n = cfg.resolution, cfg.n_frames
    tex_rng = np.random.default_rng(cfg.texture_seed) if cfg.texture_seed is not None else rng
    background = _background(tex_rng, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    target = _Sprite(rng, cfg.shape, cfg.radius_range)
    centres = _trajectory(rng, cfg, target)
    displacement = np.diff(centres, axis=0)
    displacement = np.vstack([displacement, displacement[-1:]])

    static = background.copy()
    for _ in range(cfg.distractors):
        d = _Sprite(rng, cfg.shape, cfg.radius_range, like=target)
        lo = int(np.ceil(d.extent)) + 1
        cx, cy = rng.integers(lo, size - lo, 2)
        inside = d.inside(xx - cx, yy - cy)
        static = np.where(inside[None], d.colour(xx - cx, yy - cy), static)

    events = {}
    if cfg.occluders:
        for t in _event_frames(rng, n, cfg.occlusion_rate):
            occ = _Sprite(rng, cfg.shape, cfg.radius_range, like=target)
            angle = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.5, 0.9) * (target.radius + occ.radius)
            lo = int(np.ceil(occ.extent)) + 1
            centre = np.clip(
                np.round(centres[t] + dist * np.array([np.cos(angle), np.sin(angle)])), lo, size - 1 - lo
            ).astype(np.int64)
            events[t] = (occ, centre, _velocity(rng, cfg.velocity_range), bool(rng.random() < 0.5))

    frames, flows, masks = [], [], []
    for t in range(n):
        cx, cy = centres[t]
        tgt_in = target.inside(xx - cx, yy - cy)
        frame = np.where(tgt_in[None], target.colour(xx - cx, yy - cy), static)
        mask = tgt_in.copy()
        dx = np.where(mask, float(displacement[t, 0]), 0.0)
        dy = np.where(mask, float(displacement[t, 1]), 0.0)
        if t in events:
            occ, (ox, oy), ovel, in_front = events[t]
            occ_in = occ.inside(xx - ox, yy - oy)
            visible = occ_in & ~tgt_in if not in_front else occ_in
            frame = np.where(visible[None], occ.colour(xx - ox, yy - oy), frame)
            if in_front:
                mask &= ~occ_in
            dx = np.where(visible, float(ovel[0]), dx)
            dy = np.where(visible, float(ovel[1]), dy)
        frames.append(frame)
        flows.append(flow_to_rgb(dx, dy, cfg.max_mag))
        masks.append(mask.astype(np.uint8))

    meta = {"centres": centres, "displacement": displacement, "events": sorted(events)}
    return FrameSequence(frames, flows, masks, name=name or f"synth{seed}", max_mag=cfg.max_mag, meta=meta)


# ---------------------------------------------------------------------------
# static image -> 3-frame pseudo video
# ---------------------------------------------------------------------------
def _affine(rng: np.random.Generator, h: int, w: int, max_translation: float, scale_range) -> tuple[float, np.ndarray]:
    s = float(rng.uniform(*scale_range))
    shift = rng.uniform(-max_translation, max_translation, 2) * np.array([w, h])
    return s, shift


def _apply(s: float, shift: np.ndarray, centre: np.ndarray, x: np.ndarray, y: np.ndarray):
    return centre[0] + s * (x - centre[0]) + shift[0], centre[1] + s * (y - centre[1]) + shift[1]


def _invert(s: float, shift: np.ndarray, centre: np.ndarray, x: np.ndarray, y: np.ndarray):
    return centre[0] + (x - shift[0] - centre[0]) / s, centre[1] + (y - shift[1] - centre[1]) / s


def _sample_bilinear_clamped(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape[1:]
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2 if h > 1 else 0)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        img[:, y0, x0] * (1 - fy) * (1 - fx)
        + img[:, y0, x1] * (1 - fy) * fx
        + img[:, y1, x0] * fy * (1 - fx)
        + img[:, y1, x1] * fy * fx
    )


def affine_displacement(params_from, params_to, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Displacement of every pixel of the ``params_from`` frame into the ``params_to`` frame."""
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = _invert(*params_from, centre, xx, yy)
    tx, ty = _apply(*params_to, centre, sx, sy)
    return tx - xx, ty - yy


def image_to_pseudo_video(
    image: np.ndarray,
    mask: np.ndarray,
    seed: int,
    max_translation: float = 0.05,
    scale_range: tuple[float, float] = (0.95, 1.05),
    name: str = "pseudo",
) -> FrameSequence:
    """Three jittered copies of a still image with matching masks and flow."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("pseudo-video source mask must be binary")
    h, w = mask.shape
    rng = np.random.default_rng(seed)
    jitters = [_affine(rng, h, w, max_translation, scale_range) for _ in range(3)]
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    frames, masks, disps = [], [], []
    for k, (s, shift) in enumerate(jitters):
        sx, sy = _invert(s, shift, centre, xx, yy)
        frames.append(np.clip(_sample_bilinear_clamped(image, sx, sy), 0.0, 1.0))
        ix, iy = np.rint(sx).astype(np.int64), np.rint(sy).astype(np.int64)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        masks.append(np.where(ok, mask[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)], 0).astype(np.uint8))
        if k < 2:
            disps.append(affine_displacement(jitters[k], jitters[k + 1], h, w))
    disps.append(disps[-1])
    peak = max(float(np.hypot(*d).max()) for d in disps)
    max_mag = max(1.0, 1.25 * peak)
    flows = [flow_to_rgb(dx, dy, max_mag) for dx, dy in disps]
    return FrameSequence(frames, flows, masks, name=name, max_mag=max_mag, meta={"jitters": jitters})
