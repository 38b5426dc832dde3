"""Scale alignment decoder: resolution-free implicit decoding of a pyramid.

Each output pixel centre is matched to its nearest cell at every pyramid
level. The matched feature vectors and the Fourier-embedded offsets from
those cell centres are concatenated across levels and decoded by an MLP into
two logits (background, salient).
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat, cos, gather_rows, matmul, no_grad, relu, sin
from .autodiff.ops import scale, transpose
from .encoder import NUM_LEVELS, WIDTHS
from .errors import DimensionError, ValidationError
from .params import Params, he_linear

L_FREQ = 6
HIDDEN = 128
CHUNK = 4096


def embed_width(l_freq: int = L_FREQ) -> int:
    return 4 * l_freq + 2


def mlp_input_width(widths=WIDTHS, l_freq: int = L_FREQ) -> int:
    return sum(widths) + NUM_LEVELS * embed_width(l_freq)


def init_sad_params(
    rng: np.random.Generator, widths=WIDTHS, hidden: int = HIDDEN, l_freq: int = L_FREQ, dtype=np.float32
) -> Params:
    params: Params = {}
    sizes = [mlp_input_width(widths, l_freq), hidden, hidden, 2]
    for i in range(3):
        gain = 0.1 if i == 2 else 1.0
        params[f"fc{i}.weight"], params[f"fc{i}.bias"] = he_linear(rng, sizes[i], sizes[i + 1], dtype, gain)
    return params


# ---------------------------------------------------------------------------
# coordinates
# ---------------------------------------------------------------------------
def _centers(n: int) -> np.ndarray:
    return (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0


def normalize_coords(h: int, w: int, dtype=np.float64) -> Tensor:
    """Row-major pixel-centre coordinates (x, y) in [-1, 1]^2, shape (h*w, 2)."""
    if h < 1 or w < 1:
        raise ValidationError(f"coordinate grid needs h, w >= 1, got {h}x{w}")
    ys, xs = np.meshgrid(_centers(h), _centers(w), indexing="ij")
    return Tensor(np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype))


def _nearest_axis(coord: np.ndarray, n: int) -> np.ndarray:
    # closest centre along one axis; exact ties resolve to the lower index
    guess = np.ceil((coord + 1.0) * 0.5 * n - 1.0).astype(np.int64)
    cand = np.clip(guess[:, None] + np.arange(-1, 2)[None, :], 0, n - 1)
    dist = np.abs(coord[:, None] - _centers(n)[cand])
    pick = cand[np.arange(coord.size), np.argmin(dist, axis=1)]
    # rounding can merge two distinct distances into a tie; settle those exactly
    tied = np.nonzero((dist == dist.min(axis=1, keepdims=True)).sum(axis=1) > 1)[0]
    for r in tied:
        pick[r] = min(set(cand[r].tolist()), key=lambda k: (abs(Fraction(coord[r]) - Fraction(_centers(n)[k])), k))
    return pick


def nearest_cells(query: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat cell index and cell-centre coordinate of the nearest cell per query."""
    query = np.asarray(query, dtype=np.float64)
    col = _nearest_axis(query[:, 0], w)
    row = _nearest_axis(query[:, 1], h)
    centre = np.stack([_centers(w)[col], _centers(h)[row]], axis=1)
    return row * w + col, centre


def nearest_feature(query, level_feat: Tensor) -> tuple[Tensor, Tensor]:
    """Feature vector and centre of the nearest cell of a C x H x W map.

    The selection is not differentiable; gradients reach the selected
    feature values only.
    """
    if level_feat.ndim != 3:
        raise DimensionError(f"level features must be C x H x W, got shape {level_feat.shape}")
    q = query.data if isinstance(query, Tensor) else np.asarray(query)
    c, h, w = level_feat.shape
    idx, centre = nearest_cells(q, h, w)
    table = transpose(level_feat.reshape(c, h * w), (1, 0))
    return gather_rows(table, idx), Tensor(centre.astype(level_feat.dtype))


def positional_embed(r, l_freq: int = L_FREQ) -> Tensor:
    """[r, sin(2^j pi r), cos(2^j pi r) for j < l_freq], per axis; width 4*l_freq + 2."""
    r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
    if r.ndim != 2 or r.shape[1] != 2:
        raise DimensionError(f"relative coordinates must be P x 2, got shape {r.shape}")
    parts = [r]
    for j in range(l_freq):
        arg = scale(r, (2.0**j) * np.pi)
        parts.append(sin(arg))
        parts.append(cos(arg))
    return concat(parts, axis=1)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------
def _level_tables(aligned: Sequence[Tensor]) -> list[Tensor]:
    if len(aligned) != NUM_LEVELS:
        raise ValidationError(f"decoder needs {NUM_LEVELS} pyramid levels, got {len(aligned)}")
    tables = []
    for feat in aligned:
        if feat.ndim != 4 or feat.shape[0] != 1:
            raise DimensionError(f"decoder expects 1 x C x H x W levels, got shape {feat.shape}")
        _, c, h, w = feat.shape
        tables.append(transpose(feat.reshape(c, h * w), (1, 0)))
    return tables


def _relative_embedding(query: np.ndarray, hw: tuple[int, int], l_freq: int, rescale: bool, dtype) -> tuple:
    idx, centre = nearest_cells(query, *hw)
    rel = query - centre
    if rescale:
        # express offsets in units of the level's cell size
        rel = rel * np.array([hw[1], hw[0]], dtype=np.float64) * 0.5
    with no_grad():
        emb = positional_embed(Tensor(rel), l_freq).data
    return idx, emb.astype(dtype)


def _mlp_from_blocks(
    tables: list[Tensor], plan: list[tuple[np.ndarray, np.ndarray]], params: Params, widths: list[int]
) -> Tensor:
    # first layer applied blockwise: features at cell resolution, then gathered
    w0 = params["fc0.weight"]
    expected = sum(c + plan[0][1].shape[1] for c in widths)
    if w0.shape[0] != expected:
        raise DimensionError(f"decoder input width {expected} does not match fc0 rows {w0.shape[0]}")
    hidden = None
    emb_blocks = []
    emb_rows = []
    row = 0
    for table, (idx, emb), c in zip(tables, plan, widths):
        part = gather_rows(matmul(table, w0[row : row + c]), idx)
        hidden = part if hidden is None else hidden + part
        emb_blocks.append(emb)
        emb_rows.append(np.arange(row + c, row + c + emb.shape[1]))
        row += c + emb.shape[1]
    emb_all = Tensor(np.concatenate(emb_blocks, axis=1))
    hidden = hidden + matmul(emb_all, w0[np.concatenate(emb_rows)]) + params["fc0.bias"]
    h = relu(hidden)
    h = relu(matmul(h, params["fc1.weight"]) + params["fc1.bias"])
    return matmul(h, params["fc2.weight"]) + params["fc2.bias"]


def decode_continuous(
    query, aligned: Sequence[Tensor], params: Params, l_freq: int = L_FREQ, rescale_relative: bool = False
) -> Tensor:
    """Logits (P, 2) of the continuous feature map at normalised query points."""
    levels = list(aligned.levels) if hasattr(aligned, "levels") else list(aligned)
    tables = _level_tables(levels)
    q = np.asarray(query.data if isinstance(query, Tensor) else query, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 2:
        raise DimensionError(f"query must be P x 2, got shape {q.shape}")
    dtype = levels[0].dtype
    plan = [_relative_embedding(q, lv.shape[2:], l_freq, rescale_relative, dtype) for lv in levels]
    return _mlp_from_blocks(tables, plan, params, [lv.shape[1] for lv in levels])


@lru_cache(maxsize=32)
def _query_plan(out_h: int, out_w: int, level_hw: tuple, l_freq: int, rescale: bool, dtype: str):
    coords = normalize_coords(out_h, out_w).data
    chunks = []
    for start in range(0, coords.shape[0], CHUNK):
        q = coords[start : start + CHUNK]
        chunks.append([_relative_embedding(q, hw, l_freq, rescale, np.dtype(dtype)) for hw in level_hw])
    return chunks


def predict_mask(
    aligned: Sequence[Tensor],
    out_h: int,
    out_w: int,
    params: Params,
    l_freq: int = L_FREQ,
    rescale_relative: bool = False,
) -> Tensor:
    """Logits 1 x 2 x out_h x out_w decoded at any output resolution."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output size must be >= 1, got {out_h}x{out_w}")
    levels = list(aligned.levels) if hasattr(aligned, "levels") else list(aligned)
    tables = _level_tables(levels)
    widths = [lv.shape[1] for lv in levels]
    level_hw = tuple(lv.shape[2:] for lv in levels)
    plan = _query_plan(out_h, out_w, level_hw, l_freq, rescale_relative, levels[0].dtype.str)
    pieces = [_mlp_from_blocks(tables, chunk, params, widths) for chunk in plan]
    logits = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
    return transpose(logits, (1, 0)).reshape(1, 2, out_h, out_w)


def mask_from_logits(logits: Tensor | np.ndarray) -> np.ndarray:
    """Binary mask by argmax over the class axis (ties go to background)."""
    data = logits.data if isinstance(logits, Tensor) else logits
    return (data[:, 1] > data[:, 0]).astype(np.uint8)
