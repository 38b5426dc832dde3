import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsanet import gradsuite
from tsanet.autodiff import Tensor
from tsanet.encoder import (
    WIDTHS,
    FeaturePyramid,
    encode_frame,
    extract_pyramid,
    fuse_appearance_motion,
    init_encoder_params,
)
from tsanet.errors import DimensionError, ValidationError


@pytest.fixture(scope="module")
def params():
    return init_encoder_params(np.random.default_rng(0), dtype=np.float64)


def image(rng, h=64, w=64):
    return Tensor(rng.uniform(0, 1, (1, 3, h, w)))


def test_pyramid_shapes_at_64(params):
    pyr = extract_pyramid(image(np.random.default_rng(1)), params, "appearance")
    assert pyr.shapes == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3))
def test_pyramid_follows_stride_schedule(hk, wk):
    params = init_encoder_params(np.random.default_rng(0), widths=(2, 3, 4, 5), dtype=np.float64)
    h, w = 32 * hk, 32 * wk
    pyr = extract_pyramid(Tensor(np.full((1, 3, h, w), 0.5)), params, "motion")
    for level, shape in enumerate(pyr.shapes):
        assert shape[2:] == (h // 2 ** (level + 2), w // 2 ** (level + 2))


def test_zero_image_zero_bias_gives_zero(params):
    zeroed = {k: Tensor(np.zeros_like(v.data)) if k.endswith("bias") else v for k, v in params.items()}
    pyr = extract_pyramid(Tensor(np.zeros((1, 3, 32, 32))), zeroed, "appearance")
    for level in pyr.levels:
        assert not level.data.any()


def test_indivisible_resolution_rejected(params):
    with pytest.raises(ValidationError, match="divisible by 32"):
        extract_pyramid(Tensor(np.zeros((1, 3, 48, 64))), params)


def test_out_of_range_values_rejected(params):
    with pytest.raises(ValidationError):
        extract_pyramid(Tensor(np.full((1, 3, 32, 32), 1.5)), params)


def test_fusion_pass_through(params):
    rng = np.random.default_rng(2)
    f_i = extract_pyramid(image(rng), params, "appearance")
    f_o = FeaturePyramid([Tensor(np.zeros(s)) for s in f_i.shapes])
    fusion = dict(params)
    for level, c in enumerate(WIDTHS):
        w = np.zeros((c, 2 * c, 1, 1))
        w[np.arange(c), np.arange(c), 0, 0] = 1.0
        fusion[f"fusion.{level}.weight"] = Tensor(w)
        fusion[f"fusion.{level}.bias"] = Tensor(np.zeros(c))
    fused = fuse_appearance_motion(f_i, f_o, fusion)
    for a, b in zip(fused.levels, f_i.levels):
        np.testing.assert_array_equal(a.data, b.data)


def test_fusion_keeps_level_widths(params):
    rng = np.random.default_rng(3)
    fused = encode_frame(image(rng), image(rng), params)
    assert [s[1] for s in fused.shapes] == list(WIDTHS)


def test_fusion_shape_mismatch(params):
    rng = np.random.default_rng(4)
    a = extract_pyramid(image(rng), params)
    b = extract_pyramid(image(rng, 96, 64), params)
    with pytest.raises(DimensionError):
        fuse_appearance_motion(a, b, params)


def test_branches_are_independent(params):
    rng = np.random.default_rng(5)
    rgb, flow = image(rng), image(rng)
    a = encode_frame(rgb, flow, params)
    b = encode_frame(flow, rgb, params)
    assert not np.allclose(a.levels[0].data, b.levels[0].data)


def test_pyramid_needs_four_halving_levels():
    with pytest.raises(ValidationError):
        FeaturePyramid([Tensor(np.zeros((1, 1, 4, 4)))] * 3)
    with pytest.raises(ValidationError):
        FeaturePyramid([Tensor(np.zeros((1, 1, 8 // 2**i + 1, 4))) for i in range(4)])


def test_gradients_match_finite_differences():
    results = gradsuite.run_suite("encoder")
    assert results
    for r in results:
        assert r.error < gradsuite.TOLERANCE, r
