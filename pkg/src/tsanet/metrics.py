"""Region similarity J, boundary accuracy F and their per-sequence summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import no_grad
from .data.io import list_sequences, load_sequence, read_mask, write_mask
from .data.sequence import FrameSequence
from .errors import SequenceIOError, ValidationError
from .sad import mask_from_logits
from .training import build_window, load_model

BOUNDARY_FRACTION = 0.008
_CROSS = ndimage.generate_binary_structure(2, 1)


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} mask must be binary (0/1)")
    return arr.astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred, "predicted"), _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if p.ndim != 2:
        raise ValidationError(f"masks must be 2-D, got shape {p.shape}")
    return p, g


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~interior


def boundary_tolerance(shape: tuple[int, int]) -> int:
    return math.ceil(BOUNDARY_FRACTION * math.hypot(*shape))


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def boundary_accuracy(pred, gt, tol_px: int | None = None) -> float:
    """Boundary F-measure with matches inside a disk of ``tol_px`` pixels."""
    p, g = _pair(pred, gt)
    tol = boundary_tolerance(p.shape) if tol_px is None else int(tol_px)
    pb, gb = boundary_map(p), boundary_map(g)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    se = disk(tol)
    gd = ndimage.binary_dilation(gb, structure=se)
    pd = ndimage.binary_dilation(pb, structure=se)
    precision = np.count_nonzero(pb & gd) / n_p
    recall = np.count_nonzero(gb & pd) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _mean(values) -> float:
    # offset by the first element so constant inputs average to themselves exactly
    ref = values[0]
    return ref + math.fsum(v - ref for v in values) / len(values)


def aggregate(per_frame) -> tuple[float, float, float]:
    """(mean, recall, decay) of per-frame scores.

    Decay compares the first and last of four contiguous bins; earlier bins
    take the extra frames, and short lists use the last non-empty bin.
    """
    values = [float(v) for v in per_frame]
    if not values:
        raise ValidationError("aggregate needs at least one value")
    mean = _mean(values)
    recall = sum(v > 0.5 for v in values) / len(values)
    bins = [b for b in np.array_split(np.asarray(values), 4) if len(b)]
    decay = _mean(bins[0].tolist()) - _mean(bins[-1].tolist())
    return mean, recall, decay


@dataclass
class EvalReport:
    per_sequence: dict[str, tuple[list[float], list[float]]] = field(default_factory=dict)

    def add(self, name: str, j_values: list[float], f_values: list[float]) -> None:
        self.per_sequence[name] = (list(j_values), list(f_values))

    def sequence_summary(self, name: str) -> dict[str, float]:
        js, fs = self.per_sequence[name]
        jm, jr, jd = aggregate(js)
        fm, fr, fd = aggregate(fs)
        return {"J_mean": jm, "J_recall": jr, "J_decay": jd, "F_mean": fm, "F_recall": fr, "F_decay": fd}

    def summary(self) -> dict[str, float]:
        if not self.per_sequence:
            raise ValidationError("report holds no sequences")
        rows = [self.sequence_summary(n) for n in self.per_sequence]
        out = {k: _mean([r[k] for r in rows]) for k in rows[0]}
        out["JF_mean"] = (out["J_mean"] + out["F_mean"]) / 2
        return out

    def tsv(self) -> str:
        lines = ["sequence\tJ-mean\tF-mean\tJ&F"]
        for name in self.per_sequence:
            s = self.sequence_summary(name)
            lines.append(f"{name}\t{s['J_mean']:.4f}\t{s['F_mean']:.4f}\t{(s['J_mean'] + s['F_mean']) / 2:.4f}")
        total = self.summary()
        lines.append(f"mean\t{total['J_mean']:.4f}\t{total['F_mean']:.4f}\t{total['JF_mean']:.4f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        s = self.summary()
        head = ["J&F Mean", "J Mean", "J Recall", "J Decay", "F Mean", "F Recall", "F Decay"]
        keys = ["JF_mean", "J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay"]
        return "\t".join(head) + "\n" + "\t".join(f"{100 * s[k]:.1f}" for k in keys) + "\n"


def scored_frames(n: int) -> range:
    """Frames that count toward the score: all but the first and last."""
    return range(1, n - 1) if n > 2 else range(n)


def score_sequence(pred_masks: list[np.ndarray], seq: FrameSequence) -> tuple[list[float], list[float]]:
    if len(pred_masks) != len(seq):
        raise ValidationError(f"sequence {seq.name!r}: {len(pred_masks)} predictions for {len(seq)} frames")
    idx = scored_frames(len(seq))
    j = [region_similarity(pred_masks[t], seq.masks[t]) for t in idx]
    f = [boundary_accuracy(pred_masks[t], seq.masks[t]) for t in idx]
    return j, f


def predict_sequence(model, seq: FrameSequence, size: tuple[int, int] | None = None) -> list[np.ndarray]:
    """Binary masks for every frame; the encoder runs at native resolution."""
    out_size = size if size is not None else seq.size
    masks = []
    with no_grad():
        for t in range(len(seq)):
            logits = model.forward(build_window(seq, t, dtype=model.dtype), out_size)
            masks.append(mask_from_logits(logits)[0])
    return masks


def _write_report(report: EvalReport, out_dir: Path) -> None:
    try:
        (out_dir / "report.tsv").write_text(report.tsv())
        (out_dir / "summary.txt").write_text(report.table())
    except OSError as exc:
        raise SequenceIOError(f"cannot write report under {out_dir}: {exc}") from exc


def evaluate_model(model, data_root: str | Path, out_dir: str | Path | None = None) -> EvalReport:
    report = EvalReport()
    out = Path(out_dir) if out_dir is not None else None
    for seq_dir in list_sequences(data_root):
        seq = load_sequence(seq_dir)
        preds = predict_sequence(model, seq)
        if out is not None:
            (out / seq.name).mkdir(parents=True, exist_ok=True)
            for t, m in enumerate(preds):
                write_mask(out / seq.name / f"{t:05d}.png", m)
        report.add(seq.name, *score_sequence(preds, seq))
    if not report.per_sequence:
        raise SequenceIOError(f"no sequences under {data_root}")
    if out is not None:
        _write_report(report, out)
    return report


def evaluate(model_ckpt: str | Path, data_root: str | Path, out_dir: str | Path) -> EvalReport:
    return evaluate_model(load_model(model_ckpt), data_root, out_dir)


def _prediction_dir(pred_root: Path, name: str) -> Path:
    for cand in (pred_root / name / "masks", pred_root / name):
        if cand.is_dir() and any(cand.glob("*.png")):
            return cand
    raise SequenceIOError(f"no predicted masks for {name!r} under {pred_root}")


def evaluate_masks(pred_root: str | Path, data_root: str | Path, out_dir: str | Path | None = None) -> EvalReport:
    """Score a directory of predicted masks laid out as ``<pred>/<seq>/%05d.png``."""
    pred_root = Path(pred_root)
    report = EvalReport()
    for seq_dir in list_sequences(data_root):
        seq = load_sequence(seq_dir)
        src = _prediction_dir(pred_root, seq.name)
        preds = [read_mask(src / f"{t:05d}.png") for t in range(len(seq))]
        report.add(seq.name, *score_sequence(preds, seq))
    if not report.per_sequence:
        raise SequenceIOError(f"no sequences under {data_root}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_report(report, Path(out_dir))
    return report
