"""Training loop: window assembly, Adam, multi-scale sampling, checkpoints."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy
from .autodiff.ops import resize_bilinear_array
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data.flow import flow_to_rgb, rgb_to_flow
from .data.io import load_dataset
from .data.sampler import joint_sampler
from .data.sequence import FrameSequence, window_indices
from .errors import ValidationError
from .model import ModelConfig, TSANet, Window

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 2000
    scales: tuple[int, ...] = (64, 96, 128)
    batch_size: int = 1
    seed: int = 0
    switch_every: int = 128
    checkpoint_every: int = 500
    taf_enabled: bool = True
    sad_enabled: bool = True
    target_residual: bool = False
    rescale_relative: bool = False
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    hidden: int = 128
    l_freq: int = 6
    pseudo_root: str = ""

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if not self.scales:
            raise ValidationError("scales must not be empty")
        for s in self.scales:
            if s < 32 or s % 32:
                raise ValidationError(f"scale {s} is not a positive multiple of 32")
        if self.batch_size != 1:
            raise ValidationError(f"only batch_size=1 is supported, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.switch_every < 1:
            raise ValidationError(f"switch_every must be >= 1, got {self.switch_every}")
        if self.checkpoint_every < 1:
            raise ValidationError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValidationError(f"widths must be four positive ints, got {self.widths}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=tuple(self.widths),
            hidden=self.hidden,
            l_freq=self.l_freq,
            taf_enabled=self.taf_enabled,
            sad_enabled=self.sad_enabled,
            target_residual=self.target_residual,
            rescale_relative=self.rescale_relative,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, value in values.items():
            if key not in known:
                raise ValidationError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(key, value, getattr(cls(), key))
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    text = value.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ValidationError(f"option {key}: cannot parse {value!r}") from None
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState, lr: float
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays, mutates ``state``.

    Parameters whose gradient is None are left untouched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = dict(params)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = (state.beta1 * m + (1.0 - state.beta1) * g).astype(p.dtype)
        v = (state.beta2 * v + (1.0 - state.beta2) * g * g).astype(p.dtype)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - update).astype(p.dtype)
    return out


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------
def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize at pixel centres."""
    h, w = mask.shape
    if (h, w) == (out_h, out_w):
        return mask.copy()
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[np.ix_(rows, cols)]


def resize_flow(flow: np.ndarray, max_mag: float, out_h: int, out_w: int) -> np.ndarray:
    """Resample an encoded flow image, scaling displacements with the image."""
    h, w = flow.shape[1:]
    if (h, w) == (out_h, out_w):
        return flow.copy()
    dx, dy = rgb_to_flow(flow, max_mag)
    dx = resize_bilinear_array(dx, out_h, out_w) * (out_w / w)
    dy = resize_bilinear_array(dy, out_h, out_w) * (out_h / h)
    return flow_to_rgb(dx, dy, max_mag)


def build_window(seq: FrameSequence, t: int, size: tuple[int, int] | None = None, dtype=np.float32) -> Window:
    """Frames and flows for (t-1, t, t+1), clamped, optionally resized."""
    idx = window_indices(t, len(seq))
    h, w = size if size is not None else seq.size
    frames = tuple(Tensor(resize_bilinear_array(seq.frames[i], h, w).astype(dtype)[None]) for i in idx)
    flows = tuple(Tensor(resize_flow(seq.flows[i], seq.max_mag, h, w).astype(dtype)[None]) for i in idx)
    return Window(frames, flows)


def target_mask(seq: FrameSequence, t: int, size: tuple[int, int] | None = None) -> np.ndarray:
    h, w = size if size is not None else seq.size
    return resize_mask(seq.masks[t], h, w)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
def checkpoint_from(model: TSANet, state: AdamState, iteration: int, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        params={k: p.data.copy() for k, p in model.params.items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        adam_step=state.step,
        iteration=iteration,
        config=cfg.to_dict(),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> TSANet:
    cfg = TrainConfig.from_dict(ckpt.config) if ckpt.config else TrainConfig()
    model = TSANet(cfg.model_config(), seed=cfg.seed)
    model.load_arrays(ckpt.params)
    return model


def load_model(path: str | Path) -> TSANet:
    return model_from_checkpoint(load_checkpoint(path))


def train_step(model: TSANet, state: AdamState, window: Window, target: np.ndarray, lr: float) -> float:
    model.zero_grad()
    logits = model.forward(window)
    loss = softmax_cross_entropy(logits, target[None])
    value = float(loss.data)
    if not math.isfinite(value):
        raise ValidationError(f"loss became non-finite ({value})")
    loss.backward()
    arrays = {k: p.data for k, p in model.params.items()}
    grads = {k: p.grad for k, p in model.params.items()}
    for name, arr in adam_step(arrays, grads, state, lr).items():
        model.params[name].data = arr
    return value


def train_on(
    cfg: TrainConfig,
    datasets: list[list[FrameSequence]],
    out_dir: str | Path | None = None,
    on_iteration: Callable[[int, float], None] | None = None,
) -> tuple[Checkpoint, list[float]]:
    """Train on in-memory datasets; writes checkpoints and the loss log under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = TSANet(cfg.model_config(), seed=cfg.seed)
    state = AdamState()
    sampler = joint_sampler(datasets, cfg.switch_every, cfg.seed)
    scale_rng = np.random.default_rng([cfg.seed, 7])
    losses: list[float] = []
    log_file = open(out / "loss.log", "w") if out is not None else None
    try:
        for k in range(cfg.iterations):
            seq, t = next(sampler)
            s = int(cfg.scales[scale_rng.integers(len(cfg.scales))])
            value = train_step(model, state, build_window(seq, t, (s, s)), target_mask(seq, t, (s, s)), cfg.learning_rate)
            losses.append(value)
            line = f"iter {k} loss {value:.6f}"
            log.debug(line)
            if log_file is not None:
                log_file.write(line + "\n")
            if on_iteration is not None:
                on_iteration(k, value)
            if out is not None and (k + 1) % cfg.checkpoint_every == 0 and k + 1 < cfg.iterations:
                save_checkpoint(checkpoint_from(model, state, k + 1, cfg), out / f"ckpt_{k + 1:06d}.tsck")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = checkpoint_from(model, state, cfg.iterations, cfg)
    if out is not None:
        save_checkpoint(ckpt, out / "final.tsck")
    return ckpt, losses


def train(cfg: TrainConfig, data_root: str | Path, out_dir: str | Path, **kwargs) -> tuple[Checkpoint, list[float]]:
    datasets = [load_dataset(data_root)]
    if cfg.pseudo_root:
        datasets.append(load_dataset(cfg.pseudo_root))
    return train_on(cfg, datasets, out_dir, **kwargs)
