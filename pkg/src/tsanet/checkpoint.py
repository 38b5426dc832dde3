"""Binary checkpoint format.

    magic   b"TSCK"
    u32     version (1)
    u32     entry count
    entries:
        u16   name length, name bytes (utf-8)
        u8    ndim, then ndim x u32 dims
        little-endian float32 payload

All integers are little-endian. Optimizer moments live under the parameter
name suffixed ".m" / ".v". Scalars and the config echo travel as ordinary
entries under "meta.*"; the config is its utf-8 JSON, one byte per float.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"TSCK"
VERSION = 1
META_PREFIX = "meta."


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    iteration: int = 0
    config: dict = field(default_factory=dict)

    def entries(self) -> list[tuple[str, np.ndarray]]:
        out = [(k, v) for k, v in self.params.items()]
        out += [(k + ".m", v) for k, v in self.adam_m.items()]
        out += [(k + ".v", v) for k, v in self.adam_v.items()]
        blob = np.frombuffer(json.dumps(self.config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        out += [
            ("meta.iteration", np.array([self.iteration], dtype=np.float32)),
            ("meta.adam_step", np.array([self.adam_step], dtype=np.float32)),
            ("meta.config", blob.astype(np.float32)),
        ]
        return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = ckpt.entries()
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    if rd.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes", 0)
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)
    (count,) = rd.unpack("<I", "entry count")

    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        start = rd.pos
        (name_len,) = rd.unpack("<H", f"entry {i} name length")
        try:
            name = rd.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"entry {i} name is not utf-8", start + 2) from exc
        (ndim,) = rd.unpack("<B", f"{name} ndim")
        dims = rd.unpack(f"<{ndim}I", f"{name} dims") if ndim else ()
        n = int(np.prod(dims, dtype=np.int64))
        payload = rd.take(4 * n, f"{name} data")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate entry {name!r}", start)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if rd.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - rd.pos} trailing bytes after last entry", rd.pos)

    for key in ("meta.iteration", "meta.adam_step", "meta.config"):
        if key not in tensors:
            raise CheckpointFormatError(f"checkpoint lacks {key}", rd.pos)
    try:
        config = json.loads(tensors.pop("meta.config").astype(np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"meta.config is not valid JSON: {exc}", rd.pos) from exc
    ckpt = Checkpoint(
        params={},
        iteration=int(tensors.pop("meta.iteration")[0]),
        adam_step=int(tensors.pop("meta.adam_step")[0]),
        config=config,
    )
    for name, arr in tensors.items():
        if name.startswith(META_PREFIX):
            continue
        if name.endswith(".m") and name[:-2] in tensors:
            ckpt.adam_m[name[:-2]] = arr
        elif name.endswith(".v") and name[:-2] in tensors:
            ckpt.adam_v[name[:-2]] = arr
        else:
            ckpt.params[name] = arr
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    data = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    try:
        return decode_checkpoint(buf)
    except CheckpointFormatError as exc:
        raise CheckpointFormatError(f"{path}: {exc.message}", exc.offset) from None
