"""Finite-difference verification of every differentiable operation.

Each case builds a scalar function of one float64 tensor. Composite cases use
a fixed random projection of the output as the scalar, which keeps gradient
magnitudes comparable to the function value. Sample points are redrawn until
every relu pre-activation sits at least ``KINK_MARGIN`` away from zero, so the
central differences never straddle a kink.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, gradcheck, no_grad, ops
from .autodiff.ops import track_relu_margin
from .encoder import encode_frame, extract_pyramid, fuse_appearance_motion, init_encoder_params
from .model import ModelConfig, TSANet, Window
from .params import subtree
from .sad import decode_continuous, init_sad_params, positional_embed, predict_mask
from .taf import OffsetField, aggregate_aligned, deformable_align, init_taf_params, predict_offsets_masks, taf_forward

EPS = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-4
TOY_WIDTHS = (2, 3, 4, 5)
TOY_HIDDEN = 8
TOY_LFREQ = 2
MODULES = ("tensor", "encoder", "taf", "sad", "training")

Builder = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


@dataclass
class Case:
    module: str
    name: str
    build: Builder


@dataclass
class CaseResult:
    module: str
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _leaf(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def _projector(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    weights = _const(rng.standard_normal(shape))
    return lambda out: ops.sum(ops.mul(out, weights))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    x = rng.uniform(-1.0, 1.0, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    return rng.uniform(0.05, 0.95, (1, 3, size, size))


def _toy_params(rng: np.random.Generator, random_offsets: bool = True) -> dict:
    enc = init_encoder_params(rng, TOY_WIDTHS, np.float64)
    for p in enc.values():
        if p.ndim == 1:
            p.data[:] = rng.uniform(-0.1, 0.1, p.shape)
    taf = init_taf_params(rng, TOY_WIDTHS, np.float64)
    if random_offsets:
        for name, p in taf.items():
            if name.endswith("offset.weight"):
                p.data[:] = rng.standard_normal(p.shape) * 0.3
            elif name.endswith("offset.bias"):
                p.data[:] = rng.standard_normal(p.shape) * 0.5
    return {"encoder": enc, "taf": taf}


# ---------------------------------------------------------------------------
# tensor primitives
# ---------------------------------------------------------------------------
def _tensor_cases() -> list[Case]:
    def binary(op):
        def build(rng):
            other = _const(rng.standard_normal((1, 4)))
            proj = _projector(rng, (3, 4))
            return (lambda x: proj(op(x, other))), _leaf(rng.standard_normal((3, 4)))

        return build

    def unary(op, sampler=None):
        def build(rng):
            shape = (3, 5)
            data = sampler(rng, shape) if sampler else rng.standard_normal(shape)
            proj = _projector(rng, shape)
            return (lambda x: proj(op(x))), _leaf(data)

        return build

    def concat_build(rng):
        other = _const(rng.standard_normal((2, 3)))
        proj = _projector(rng, (2, 5))
        return (lambda x: proj(ops.concat([x, other], axis=1))), _leaf(rng.standard_normal((2, 2)))

    def reduce_build(rng):
        proj = _projector(rng, (3,))
        return (lambda x: proj(ops.mean(ops.mul(x, x), axis=1)) + ops.sum(x)), _leaf(rng.standard_normal((3, 4)))

    def matmul_build(side):
        def build(rng):
            a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
            proj = _projector(rng, (3, 2))
            if side == "a":
                other = _const(b)
                return (lambda x: proj(ops.matmul(x, other))), _leaf(a)
            other = _const(a)
            return (lambda x: proj(ops.matmul(other, x))), _leaf(b)

        return build

    def conv_build(wrt, stride=1):
        def build(rng):
            inp = rng.standard_normal((1, 2, 5, 5))
            w = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            ho = (5 + 2 - 3) // stride + 1
            proj = _projector(rng, (1, 3, ho, ho))
            if wrt == "input":
                W, B = _const(w), _const(b)
                return (lambda x: proj(ops.conv2d(x, W, B, stride=stride, pad=1))), _leaf(inp)
            if wrt == "weight":
                X, B = _const(inp), _const(b)
                return (lambda x: proj(ops.conv2d(X, x, B, stride=stride, pad=1))), _leaf(w)
            X, W = _const(inp), _const(w)
            return (lambda x: proj(ops.conv2d(X, W, x, stride=stride, pad=1))), _leaf(b)

        return build

    def grid_build(wrt):
        def build(rng):
            feat = rng.standard_normal((1, 2, 4, 5))
            pts = np.stack([rng.uniform(-1.5, 5.5, 12), rng.uniform(-1.5, 4.5, 12)], axis=-1)[None]
            proj = _projector(rng, (1, 2, 12))
            if wrt == "input":
                P = _const(pts)
                return (lambda x: proj(ops.grid_sample_bilinear(x, P))), _leaf(feat)
            F = _const(feat)
            return (lambda x: proj(ops.grid_sample_bilinear(F, x))), _leaf(pts)

        return build

    def gather_build(rng):
        idx = rng.integers(0, 4, 7)
        proj = _projector(rng, (7, 3))
        return (lambda x: proj(ops.gather_rows(x, idx))), _leaf(rng.standard_normal((4, 3)))

    def resize_build(rng):
        proj = _projector(rng, (1, 2, 7, 9))
        return (lambda x: proj(ops.resize_bilinear(x, 7, 9))), _leaf(rng.standard_normal((1, 2, 3, 4)))

    def ce_build(rng):
        target = rng.integers(0, 2, (1, 3, 3))
        return (lambda x: ops.softmax_cross_entropy(x, target)), _leaf(rng.standard_normal((1, 2, 3, 3)))

    def slice_build(rng):
        proj = _projector(rng, (2, 2))
        return (lambda x: proj(x[:, 1:3])), _leaf(rng.standard_normal((2, 4)))

    return [
        Case("tensor", "add", binary(ops.add)),
        Case("tensor", "mul", binary(ops.mul)),
        Case("tensor", "scale", unary(lambda x: ops.scale(x, -2.5))),
        Case("tensor", "relu", unary(ops.relu, _away_from_zero)),
        Case("tensor", "sigmoid", unary(ops.sigmoid)),
        Case("tensor", "sin/cos", unary(lambda x: ops.add(ops.sin(x), ops.cos(x)))),
        Case("tensor", "concat", concat_build),
        Case("tensor", "slice", slice_build),
        Case("tensor", "sum/mean", reduce_build),
        Case("tensor", "matmul[a]", matmul_build("a")),
        Case("tensor", "matmul[b]", matmul_build("b")),
        Case("tensor", "conv2d[input]", conv_build("input")),
        Case("tensor", "conv2d[weight]", conv_build("weight")),
        Case("tensor", "conv2d[bias]", conv_build("bias")),
        Case("tensor", "conv2d[stride2]", conv_build("input", stride=2)),
        Case("tensor", "grid_sample_bilinear[input]", grid_build("input")),
        Case("tensor", "grid_sample_bilinear[points]", grid_build("points")),
        Case("tensor", "gather_rows", gather_build),
        Case("tensor", "resize_bilinear", resize_build),
        Case("tensor", "softmax_cross_entropy", ce_build),
    ]


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------
def _encoder_cases() -> list[Case]:
    def pyramid_build(wrt):
        def build(rng):
            params = _toy_params(rng)["encoder"]
            img = _image(rng)
            projs = [_projector(rng, (1, c, 32 >> (l + 2), 32 >> (l + 2))) for l, c in enumerate(TOY_WIDTHS)]

            def f(x):
                inp = x if wrt == "image" else _const(img)
                pyr = extract_pyramid(inp, params, "motion")
                return sum((p(lv) for p, lv in zip(projs, pyr.levels)), _const(0.0))

            if wrt == "image":
                return f, _leaf(img[:, :, :32, :32])
            x = params["motion.block1.weight"]
            return f, _leaf_param(x)

        return build

    def fuse_build(wrt):
        def build(rng):
            params = _toy_params(rng)["encoder"]
            with no_grad():
                f_i = extract_pyramid(_const(_image(rng)), params, "appearance")
                f_o = extract_pyramid(_const(_image(rng)), params, "motion")
            projs = [_projector(rng, lv.shape) for lv in f_i.levels]

            def run(levels_i):
                fused = fuse_appearance_motion(type(f_i)(levels_i), f_o, params)
                return sum((p(lv) for p, lv in zip(projs, fused.levels)), _const(0.0))

            if wrt == "features":
                return (lambda x: run([x] + f_i.levels[1:])), _leaf(f_i.levels[0].data)
            return (lambda x: run(f_i.levels)), _leaf_param(params["fusion.1.weight"])

        return build

    return [
        Case("encoder", "extract_pyramid[image]", pyramid_build("image")),
        Case("encoder", "extract_pyramid[weight]", pyramid_build("weight")),
        Case("encoder", "fuse_appearance_motion[features]", fuse_build("features")),
        Case("encoder", "fuse_appearance_motion[weight]", fuse_build("weight")),
    ]


def _leaf_param(p: Tensor) -> Tensor:
    # the parameter itself is the leaf under test
    p.requires_grad = True
    if p.grad is None:
        p.grad = np.zeros_like(p.data)
    return p


# ---------------------------------------------------------------------------
# temporal alignment
# ---------------------------------------------------------------------------
def _taf_cases() -> list[Case]:
    c, h, w = 3, 5, 5

    def level_params(rng):
        return subtree(_toy_params(rng)["taf"], "1")

    def offsets_build(wrt):
        def build(rng):
            params = level_params(rng)
            adj, tgt = rng.standard_normal((1, c, h, w)), rng.standard_normal((1, c, h, w))
            p_off = _projector(rng, (1, 18, h, w))
            p_mask = _projector(rng, (1, 9, h, w))

            def f(x):
                a = x if wrt == "adjacent" else _const(adj)
                t = x if wrt == "target" else _const(tgt)
                field = predict_offsets_masks(a, t, params)
                return p_off(field.offsets) + p_mask(field.masks)

            return f, _leaf(adj if wrt == "adjacent" else tgt)

        return build

    def align_build(wrt):
        def build(rng):
            params = level_params(rng)
            feat = rng.standard_normal((1, c, h, w))
            offsets = rng.uniform(-1.7, 1.7, (1, 18, h, w))
            masks = rng.uniform(0.05, 0.95, (1, 9, h, w))
            proj = _projector(rng, (1, c, h, w))

            def f(x):
                F = x if wrt == "features" else _const(feat)
                O = x if wrt == "offsets" else _const(offsets)
                M = x if wrt == "masks" else _const(masks)
                return proj(deformable_align(F, OffsetField(O, M), params))

            if wrt == "weight":
                return f, _leaf_param(params["deform.weight"])
            return f, _leaf({"features": feat, "offsets": offsets, "masks": masks}[wrt])

        return build

    def aggregate_build(wrt):
        def build(rng):
            params = level_params(rng)
            a_prev, a_next = rng.standard_normal((1, c, h, w)), rng.standard_normal((1, c, h, w))
            proj = _projector(rng, (1, c, h, w))

            def f(x):
                prev = x if wrt == "aligned" else _const(a_prev)
                return proj(aggregate_aligned(prev, _const(a_next), params))

            if wrt == "weight":
                return f, _leaf_param(params["aggregate.weight"])
            return f, _leaf(a_prev)

        return build

    def taf_build(rng):
        params = _toy_params(rng)
        with no_grad():
            pyrs = [encode_frame(_const(_image(rng)), _const(_image(rng)), params["encoder"]) for _ in range(3)]
        projs = [_projector(rng, lv.shape) for lv in pyrs[1].levels]

        def f(x):
            prev = type(pyrs[0])([x] + pyrs[0].levels[1:])
            out = taf_forward(prev, pyrs[1], pyrs[2], params["taf"])
            return sum((p(lv) for p, lv in zip(projs, out.levels)), _const(0.0))

        return f, _leaf(pyrs[0].levels[0].data)

    return [
        Case("taf", "predict_offsets_masks[adjacent]", offsets_build("adjacent")),
        Case("taf", "predict_offsets_masks[target]", offsets_build("target")),
        Case("taf", "deformable_align[features]", align_build("features")),
        Case("taf", "deformable_align[offsets]", align_build("offsets")),
        Case("taf", "deformable_align[masks]", align_build("masks")),
        Case("taf", "deformable_align[weight]", align_build("weight")),
        Case("taf", "aggregate_aligned[features]", aggregate_build("aligned")),
        Case("taf", "aggregate_aligned[weight]", aggregate_build("weight")),
        Case("taf", "taf_forward[8x8 level]", taf_build),
    ]


# ---------------------------------------------------------------------------
# scale alignment decoder
# ---------------------------------------------------------------------------
def _toy_pyramid(rng: np.random.Generator, top: int = 8) -> list[np.ndarray]:
    return [rng.standard_normal((1, c, top >> l, top >> l)) for l, c in enumerate(TOY_WIDTHS)]


def _sad_cases() -> list[Case]:
    def embed_build(rng):
        proj = _projector(rng, (6, 4 * TOY_LFREQ + 2))
        return (lambda x: proj(positional_embed(x, TOY_LFREQ))), _leaf(rng.uniform(-0.3, 0.3, (6, 2)))

    def decode_build(wrt):
        def build(rng):
            params = init_sad_params(rng, TOY_WIDTHS, TOY_HIDDEN, TOY_LFREQ, np.float64)
            levels = _toy_pyramid(rng)
            query = rng.uniform(-1, 1, (5, 2))
            proj = _projector(rng, (5, 2))

            def f(x):
                lv = [x if (wrt == "features" and i == 1) else _const(a) for i, a in enumerate(levels)]
                return proj(decode_continuous(query, lv, params, TOY_LFREQ))

            if wrt == "features":
                return f, _leaf(levels[1])
            return f, _leaf_param(params["fc0.weight"])

        return build

    def mask_build(rng):
        params = init_sad_params(rng, TOY_WIDTHS, TOY_HIDDEN, TOY_LFREQ, np.float64)
        levels = _toy_pyramid(rng)
        proj = _projector(rng, (1, 2, 7, 6))

        def f(x):
            lv = [x if i == 0 else _const(a) for i, a in enumerate(levels)]
            return proj(predict_mask(lv, 7, 6, params, TOY_LFREQ))

        return f, _leaf(levels[0])

    return [
        Case("sad", "positional_embed", embed_build),
        Case("sad", "decode_continuous[features]", decode_build("features")),
        Case("sad", "decode_continuous[theta]", decode_build("theta")),
        Case("sad", "predict_mask[features]", mask_build),
    ]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------
def _training_cases() -> list[Case]:
    def forward_build(param_name, sad_enabled=True):
        def build(rng):
            cfg = ModelConfig(widths=TOY_WIDTHS, hidden=TOY_HIDDEN, l_freq=TOY_LFREQ, sad_enabled=sad_enabled)
            model = TSANet(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
            toy = _toy_params(rng)
            for name, p in toy["taf"].items():
                model.params[f"taf.{name}"].data[:] = p.data
            for name, p in model.params.items():
                if name.startswith("encoder") and p.ndim == 1:
                    p.data[:] = rng.uniform(-0.1, 0.1, p.shape)
            window = Window(
                tuple(_const(_image(rng)) for _ in range(3)),
                tuple(_const(_image(rng)) for _ in range(3)),
            )
            proj = _projector(rng, (1, 2, 32, 32))
            return (lambda x: proj(model.forward(window))), _leaf_param(model.params[param_name])

        return build

    return [
        Case("training", "forward_segment[taf offset bias]", forward_build("taf.0.offset.bias")),
        Case("training", "forward_segment[encoder bias]", forward_build("encoder.appearance.block2.bias")),
        Case("training", "forward_segment[sad fc1 bias]", forward_build("sad.fc1.bias")),
        Case("training", "forward_segment[bilinear decoder]", forward_build("bilinear.2.weight", sad_enabled=False)),
    ]


def all_cases() -> list[Case]:
    return _tensor_cases() + _encoder_cases() + _taf_cases() + _sad_cases() + _training_cases()


def select_cases(module: str = "all") -> list[Case]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"module must be 'all' or one of {MODULES}, got {module!r}")
    return [c for c in all_cases() if module == "all" or c.module == module]


def _draw(case: Case, seed: int, index: int, attempts: int = 64):
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, index, attempt])
        f, x = case.build(rng)
        with no_grad(), track_relu_margin() as margin:
            f(x)
        if margin.min >= KINK_MARGIN:
            return f, x
    raise RuntimeError(f"{case.name}: no sample cleared the relu margin in {attempts} draws")


def run_case(case: Case, seed: int = 0, index: int = 0) -> CaseResult:
    start = time.perf_counter()
    f, x = _draw(case, seed, index)
    err = gradcheck(f, x, EPS)
    return CaseResult(case.module, case.name, err, time.perf_counter() - start)


def run_suite(module: str = "all", seed: int = 0) -> list[CaseResult]:
    cases = all_cases()
    return [run_case(c, seed, i) for i, c in enumerate(cases) if module == "all" or c.module == module]


@contextlib.contextmanager
def inject_backward_fault(op_name: str) -> Iterator[None]:
    """Corrupt the backward rule of one op (harness self-test)."""
    original = Tensor.__dict__["_from_op"]

    def faulty(cls, data, parents, backward, op):
        if op == op_name:
            inner = backward

            def backward(g):
                return [None if gi is None else gi * 1.5 for gi in inner(g)]

        return original.__func__(cls, data, parents, backward, op)

    Tensor._from_op = classmethod(faulty)
    try:
        yield
    finally:
        Tensor._from_op = original
