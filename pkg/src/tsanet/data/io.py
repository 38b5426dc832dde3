"""DAVIS-style on-disk layout.

    <root>/<seq>/frames/00000.png   8-bit RGB
    <root>/<seq>/flows/00000.png    8-bit RGB, encoded flow
    <root>/<seq>/masks/00000.png    8-bit gray, {0, 255}
    <root>/<seq>/meta.txt           max_mag=<float>, n_frames=<int>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import SequenceIOError, ValidationError
from .sequence import FrameSequence

SUBDIRS = ("frames", "flows", "masks")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: Path, array: np.ndarray) -> None:
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as exc:
        raise SequenceIOError(f"cannot write {path}: {exc}") from exc


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except OSError as exc:
        raise SequenceIOError(f"cannot read {path}: {exc}") from exc


def write_mask(path: Path, mask: np.ndarray) -> None:
    write_png(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path: Path) -> np.ndarray:
    raw = read_png(path)
    if raw.ndim != 2:
        raise SequenceIOError(f"{path}: mask must be single-channel, got shape {raw.shape}")
    if not np.isin(raw, (0, 255)).all():
        bad = np.unique(raw[~np.isin(raw, (0, 255))])[:5]
        raise SequenceIOError(f"{path}: mask values must be 0 or 255, found {bad.tolist()}")
    return (raw == 255).astype(np.uint8)


def read_rgb(path: Path) -> np.ndarray:
    raw = read_png(path)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise SequenceIOError(f"{path}: expected an RGB image, got shape {raw.shape}")
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_sequence(seq: FrameSequence, directory: str | Path) -> Path:
    directory = Path(directory)
    try:
        for sub in SUBDIRS:
            (directory / sub).mkdir(parents=True, exist_ok=True)
        (directory / "meta.txt").write_text(f"max_mag={seq.max_mag!r}\nn_frames={len(seq)}\n")
    except OSError as exc:
        raise SequenceIOError(f"cannot write sequence to {directory}: {exc}") from exc
    for i, (frame, flow, mask) in enumerate(zip(seq.frames, seq.flows, seq.masks)):
        write_png(directory / "frames" / f"{i:05d}.png", to_uint8(frame).transpose(1, 2, 0))
        write_png(directory / "flows" / f"{i:05d}.png", to_uint8(flow).transpose(1, 2, 0))
        write_mask(directory / "masks" / f"{i:05d}.png", mask)
    return directory


def read_meta(directory: Path) -> dict[str, str]:
    path = directory / "meta.txt"
    if not path.is_file():
        raise SequenceIOError(f"missing sidecar {path}")
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SequenceIOError(f"{path}:{lineno}: expected key=value, got {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def _listing(path: Path) -> list[Path]:
    if not path.is_dir():
        raise SequenceIOError(f"missing directory {path}")
    return sorted(path.glob("*.png"))


def load_sequence(directory: str | Path) -> FrameSequence:
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceIOError(f"sequence directory {directory} does not exist")
    meta = read_meta(directory)
    try:
        max_mag = float(meta.get("max_mag", "8.0"))
        n_meta = int(meta["n_frames"]) if "n_frames" in meta else None
    except ValueError as exc:
        raise SequenceIOError(f"{directory / 'meta.txt'}: {exc}") from exc
    files = {sub: _listing(directory / sub) for sub in SUBDIRS}
    counts = {sub: len(v) for sub, v in files.items()}
    if len(set(counts.values())) != 1 or (n_meta is not None and counts["frames"] != n_meta):
        raise SequenceIOError(f"{directory}: inconsistent file counts {counts} (meta n_frames={n_meta})")
    if counts["frames"] == 0:
        raise SequenceIOError(f"{directory}: no frames")
    for sub in SUBDIRS:
        names = [p.name for p in files[sub]]
        if names != [p.name for p in files["frames"]]:
            raise SequenceIOError(f"{directory / sub}: file names do not match {directory / 'frames'}")

    frames = [read_rgb(p) for p in files["frames"]]
    flows = [read_rgb(p) for p in files["flows"]]
    masks = [read_mask(p) for p in files["masks"]]
    shapes = {a.shape[-2:] for a in frames + flows} | {m.shape for m in masks}
    if len(shapes) != 1:
        raise SequenceIOError(f"{directory}: images have unequal resolutions {sorted(shapes)}")
    try:
        return FrameSequence(frames, flows, masks, name=directory.name, max_mag=max_mag)
    except ValidationError as exc:
        raise SequenceIOError(f"{directory}: {exc}") from exc


def list_sequences(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise SequenceIOError(f"data root {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "frames").is_dir())


def load_dataset(root: str | Path) -> list[FrameSequence]:
    dirs = list_sequences(root)
    if not dirs:
        raise SequenceIOError(f"no sequences under {root}")
    return [load_sequence(d) for d in dirs]
