"""Command-line entry point: ``tsanet <subcommand> ...``.

Exit codes: 0 success, 1 invalid input, 2 I/O or file format, 3 internal.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradsuite
from .data.io import load_sequence, read_mask, read_rgb, save_sequence, to_uint8, write_mask, write_png
from .data.synthetic import SyntheticConfig, generate_synthetic_sequence
from .errors import SequenceIOError, ValidationError
from .metrics import evaluate, evaluate_masks, predict_sequence
from .training import TrainConfig, load_config_file, load_model, train

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3
RED = np.array([255.0, 0.0, 0.0])


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _echo(title: str, values: dict) -> None:
    print(f"# {title}")
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        print(f"{key}={value}")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        resolution=args.resolution,
        n_frames=args.frames,
        shape=args.shape,
        velocity_range=(args.min_speed, args.max_speed),
        texture_seed=args.texture_seed,
        occluders=args.occluders,
        distractors=args.distractors,
    )
    _echo("synth", {"out": args.out, "sequences": args.sequences, "seed": args.seed, **cfg.to_dict()})
    cfg.validate()
    if args.sequences < 1:
        raise ValidationError(f"--sequences must be >= 1, got {args.sequences}")
    out = Path(args.out)
    for i in range(args.sequences):
        seq = generate_synthetic_sequence(cfg, [args.seed, i], name=f"seq{i:03d}")
        save_sequence(seq, out / seq.name)
    print(f"wrote {args.sequences} sequences to {out}")
    return EXIT_OK


_TRAIN_FLAGS = {f.name: f for f in fields(TrainConfig)}


def cmd_train(args) -> int:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    for name in _TRAIN_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = TrainConfig.from_dict(values)
    _echo("train", {"data": args.data, "out": args.out, **cfg.to_dict()})

    def report(k: int, loss: float) -> None:
        if args.verbose or k % 50 == 0 or k == cfg.iterations - 1:
            print(f"iter {k} loss {loss:.6f}", flush=True)

    train(cfg, args.data, args.out, on_iteration=report)
    print(f"checkpoint {Path(args.out) / 'final.tsck'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.ckpt is None) == (args.pred is None):
        raise UsageError("eval: give exactly one of --ckpt or --pred")
    _echo("eval", {"ckpt": args.ckpt, "pred": args.pred, "data": args.data, "out": args.out})
    if args.ckpt is not None:
        report = evaluate(args.ckpt, args.data, args.out)
    else:
        report = evaluate_masks(args.pred, args.data, args.out)
    sys.stdout.write(report.tsv())
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_infer(args) -> int:
    size = tuple(args.size) if args.size else None
    if size is not None and min(size) < 1:
        raise ValidationError(f"--size must be positive, got {size}")
    _echo("infer", {"ckpt": args.ckpt, "seq": args.seq, "out": args.out, "size": size or "native"})
    model = load_model(args.ckpt)
    seq = load_sequence(args.seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, mask in enumerate(predict_sequence(model, seq, size)):
        write_mask(out / f"{t:05d}.png", mask)
    print(f"wrote {len(seq)} masks to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo("gradcheck", {"seed": args.seed, "module": args.module, "eps": gradsuite.EPS, "tolerance": gradsuite.TOLERANCE})
    if args.inject_fault:
        with gradsuite.inject_backward_fault(args.inject_fault):
            results = gradsuite.run_suite(args.module, args.seed)
    else:
        results = gradsuite.run_suite(args.module, args.seed)
    width = max(len(f"{r.module}.{r.name}") for r in results)
    print(f"{'op':<{width}}  max_rel_error  status")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.module + '.' + r.name:<{width}}  {r.error:.3e}      {status}")
    failed = [r for r in results if not r.passed]
    worst = max(r.error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed, worst {worst:.3e}")
    return EXIT_OK if not failed else EXIT_INTERNAL


def blend(frame_u8: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Half-strength red tint over masked pixels of an H x W x 3 uint8 frame."""
    out = frame_u8.astype(np.float64)
    sel = mask.astype(bool)
    out[sel] = 0.5 * out[sel] + 0.5 * RED
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_overlay(args) -> int:
    _echo("overlay", {"seq": args.seq, "masks": args.masks, "out": args.out})
    frame_dir, mask_dir, out = Path(args.seq) / "frames", Path(args.masks), Path(args.out)
    frames = sorted(frame_dir.glob("*.png"))
    if not frames:
        raise SequenceIOError(f"no frames under {frame_dir}")
    out.mkdir(parents=True, exist_ok=True)
    for path in frames:
        frame = to_uint8(read_rgb(path)).transpose(1, 2, 0)
        mask = read_mask(mask_dir / path.name)
        if mask.shape != frame.shape[:2]:
            raise ValidationError(f"{mask_dir / path.name}: mask {mask.shape} does not match frame {frame.shape[:2]}")
        write_png(out / path.name, blend(frame, mask))
    print(f"wrote {len(frames)} overlays to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsanet", description="Video object segmentation with temporal alignment fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=SyntheticConfig.n_frames)
    p.add_argument("--resolution", type=int, default=SyntheticConfig.resolution)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--occluders", type=_bool, default=False)
    p.add_argument("--distractors", type=int, default=SyntheticConfig.distractors)
    p.add_argument("--shape", default=SyntheticConfig.shape)
    p.add_argument("--min-speed", type=int, default=SyntheticConfig.velocity_range[0])
    p.add_argument("--max-speed", type=int, default=SyntheticConfig.velocity_range[1])
    p.add_argument("--texture-seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--verbose", action="store_true", help="print every iteration")
    for name, f in _TRAIN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        default = TrainConfig.__dataclass_fields__[name].default
        if isinstance(default, bool):
            p.add_argument(flag, dest=name, type=_bool, default=None)
        elif isinstance(default, tuple):
            p.add_argument(flag, dest=name, type=int, nargs="+", default=None)
        else:
            p.add_argument(flag, dest=name, type=type(default), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--pred", default=None, help="directory of predicted masks <pred>/<seq>/%%05d.png")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict masks for one sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--module", choices=("all", *gradsuite.MODULES), default="all")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overlay", help="tint masked pixels red over the frames")
    p.add_argument("--seq", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
