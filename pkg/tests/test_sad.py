import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import nearest_cell_brute
from tsanet import gradsuite
from tsanet.autodiff import Tensor, concat, matmul, relu
from tsanet.errors import ValidationError
from tsanet.sad import (
    CHUNK,
    decode_continuous,
    embed_width,
    init_sad_params,
    mask_from_logits,
    mlp_input_width,
    nearest_cells,
    nearest_feature,
    normalize_coords,
    positional_embed,
    predict_mask,
)

TOY = (2, 3, 4, 5)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def toy_pyramid(rng, top=8, widths=TOY):
    return [t(rng.normal(size=(1, c, top >> i, top >> i))) for i, c in enumerate(widths)]


class TestCoordinates:
    def test_single_pixel_is_centre(self):
        np.testing.assert_array_equal(normalize_coords(1, 1).data, [[0.0, 0.0]])

    def test_two_by_two(self):
        assert set(normalize_coords(2, 2).data[:, 0]) == {-0.5, 0.5}

    def test_matches_direct_formula(self):
        got = normalize_coords(4, 6).data
        k = 0
        for i in range(4):
            for j in range(6):
                assert got[k, 0] == pytest.approx((j + 0.5) / 6 * 2 - 1, abs=1e-15)
                assert got[k, 1] == pytest.approx((i + 0.5) / 4 * 2 - 1, abs=1e-15)
                k += 1

    def test_rejects_empty_grid(self):
        with pytest.raises(ValidationError):
            normalize_coords(0, 3)


class TestNearest:
    def test_single_cell(self):
        feat = t(np.arange(3.0).reshape(3, 1, 1))
        z, centre = nearest_feature(np.random.default_rng(0).uniform(-1, 1, (7, 2)), feat)
        np.testing.assert_array_equal(centre.data, 0.0)
        np.testing.assert_array_equal(z.data, np.tile([0.0, 1.0, 2.0], (7, 1)))

    def test_query_at_cell_centre(self):
        q = normalize_coords(3, 5).data
        idx, centre = nearest_cells(q, 3, 5)
        np.testing.assert_array_equal(idx, np.arange(15))
        np.testing.assert_array_equal(centre, q)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        feat = rng.normal(size=(4, 3, 5))
        q = rng.uniform(-1, 1, (50, 2))
        z, centre = nearest_feature(q, t(feat))
        for k in range(50):
            i, j, c = nearest_cell_brute(q[k], 3, 5)
            np.testing.assert_array_equal(z.data[k], feat[:, i, j])
            np.testing.assert_array_equal(centre.data[k], c)

    def test_ties_prefer_lower_row_then_column(self):
        # the midpoint between four cell centres of a 2x2 grid
        idx, _ = nearest_cells(np.array([[0.0, 0.0]]), 2, 2)
        assert idx[0] == 0
        idx, _ = nearest_cells(np.array([[0.0, 0.5]]), 2, 2)
        assert idx[0] == 2

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(1, 9),
        st.integers(1, 9),
        st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=20),
    )
    def test_property_brute_force_and_bound(self, h, w, pts):
        q = np.array(pts, dtype=np.float64)
        idx, centre = nearest_cells(q, h, w)
        for k in range(len(q)):
            i, j, _ = nearest_cell_brute(q[k], h, w)
            assert idx[k] == i * w + j
        rel = np.abs(q - centre)
        assert np.all(rel[:, 0] <= 1.0 / w + 1e-15)
        assert np.all(rel[:, 1] <= 1.0 / h + 1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.data())
    def test_property_grid_midpoints(self, h, w, data):
        # queries on cell boundaries are exact ties; the brute-force order decides
        i = data.draw(st.integers(0, h))
        j = data.draw(st.integers(0, w))
        q = np.array([[j / w * 2 - 1, i / h * 2 - 1]])
        idx, _ = nearest_cells(q, h, w)
        bi, bj, _ = nearest_cell_brute(q[0], h, w)
        assert idx[0] == bi * w + bj

    def test_every_grid_midpoint(self):
        for h in range(1, 9):
            for w in range(1, 9):
                q = np.array([[j / w * 2 - 1, i / h * 2 - 1] for i in range(h + 1) for j in range(w + 1)])
                idx, _ = nearest_cells(q, h, w)
                for k in range(len(q)):
                    bi, bj, _ = nearest_cell_brute(q[k], h, w)
                    assert idx[k] == bi * w + bj, (h, w, q[k])

    def test_float_near_tie_picks_truly_nearer_cell(self):
        # -0.6 is slightly closer to the centre -0.4 than to -0.8 in binary floating point
        idx, _ = nearest_cells(np.array([[1 / 5 * 2 - 1, -1.0]]), 1, 5)
        assert idx[0] == 1

    def test_gradient_reaches_selected_features_only(self):
        feat = Tensor(np.random.default_rng(2).normal(size=(2, 2, 2)), requires_grad=True)
        z, _ = nearest_feature(np.array([[-0.5, -0.5], [-0.4, -0.6]]), feat)
        z.sum().backward()
        expected = np.zeros((2, 2, 2))
        expected[:, 0, 0] = 2.0
        np.testing.assert_array_equal(feat.grad, expected)


class TestEmbedding:
    def test_zero(self):
        out = positional_embed(np.zeros((1, 2)), 6).data[0]
        assert out.shape == (26,)
        np.testing.assert_array_equal(out[:2], 0.0)
        np.testing.assert_array_equal(out[2::4], 0.0)
        np.testing.assert_array_equal(out[3::4], 0.0)
        np.testing.assert_array_equal(out[4::4], 1.0)
        np.testing.assert_array_equal(out[5::4], 1.0)

    def test_width(self):
        assert embed_width(6) == 26
        assert positional_embed(np.zeros((3, 2)), 6).shape == (3, 26)

    def test_half_at_lowest_frequency(self):
        out = positional_embed(np.array([[0.5, 0.0]]), 6).data[0]
        # layout: r_x, r_y, then per frequency sin_x, sin_y, cos_x, cos_y
        assert abs(out[2] - 1.0) <= 1e-12
        assert abs(out[4]) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=10))
    def test_sinusoids_bounded(self, pts):
        out = positional_embed(np.array(pts), 6).data
        assert np.all(np.abs(out[:, 2:]) <= 1.0)


def naive_decode(query, levels, params, l_freq):
    """Literal concatenation of every level's feature and embedding, then the MLP."""
    parts = []
    for lv in levels:
        z, centre = nearest_feature(query, lv.reshape(*lv.shape[1:]))
        parts += [z, positional_embed(t(query) - centre, l_freq)]
    x = concat(parts, axis=1)
    h = relu(matmul(x, params["fc0.weight"]) + params["fc0.bias"])
    h = relu(matmul(h, params["fc1.weight"]) + params["fc1.bias"])
    return matmul(h, params["fc2.weight"]) + params["fc2.bias"]


class TestDecode:
    def test_input_width(self):
        assert mlp_input_width((16, 32, 64, 128), 6) == 344
        params = init_sad_params(np.random.default_rng(0))
        assert params["fc0.weight"].shape == (344, 128)

    def test_matches_naive_concatenation(self):
        rng = np.random.default_rng(3)
        levels = toy_pyramid(rng)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        q = rng.uniform(-1, 1, (30, 2))
        got = decode_continuous(q, levels, params, l_freq=2).data
        ref = naive_decode(q, levels, params, 2).data
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_identical_queries_identical_logits(self):
        rng = np.random.default_rng(4)
        levels = toy_pyramid(rng)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        out = decode_continuous(np.array([[0.3, -0.2], [0.3, -0.2]]), levels, params, l_freq=2).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_wrong_level_count(self):
        rng = np.random.default_rng(5)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        with pytest.raises(ValidationError):
            decode_continuous(np.zeros((1, 2)), toy_pyramid(rng)[:3], params, l_freq=2)

    def test_predict_mask_shape(self):
        rng = np.random.default_rng(6)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        assert predict_mask(toy_pyramid(rng), 64, 64, params, 2).shape == (1, 2, 64, 64)

    def test_predict_mask_chunking_matches_single_pass(self):
        rng = np.random.default_rng(7)
        levels = toy_pyramid(rng)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        h, w = 72, 64  # more than one chunk
        assert h * w > CHUNK
        got = predict_mask(levels, h, w, params, 2).data
        ref = decode_continuous(normalize_coords(h, w).data, levels, params, l_freq=2).data
        np.testing.assert_allclose(got[0].reshape(2, -1).T, ref, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("base,ratio", [(16, 3), (32, 3), (12, 5)])
    def test_coincident_centres_decode_identically(self, base, ratio):
        rng = np.random.default_rng(8)
        levels = toy_pyramid(rng)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        lo = predict_mask(levels, base, base, params, 2).data
        hi = predict_mask(levels, base * ratio, base * ratio, params, 2).data
        np.testing.assert_array_equal(lo, hi[:, :, ratio // 2 :: ratio, ratio // 2 :: ratio])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40))
    def test_any_resolution_is_finite(self, h, w):
        rng = np.random.default_rng(9)
        params = init_sad_params(rng, TOY, 8, 2, np.float64)
        out = predict_mask(toy_pyramid(rng), h, w, params, 2).data
        assert out.shape == (1, 2, h, w) and np.all(np.isfinite(out))

    def test_mask_is_argmax(self):
        logits = np.array([[[[0.0, 1.0, 2.0]], [[1.0, 1.0, 0.0]]]])
        np.testing.assert_array_equal(mask_from_logits(logits), [[[1, 0, 0]]])

    def test_gradients_match_finite_differences(self):
        results = gradsuite.run_suite("sad")
        assert results
        for r in results:
            assert r.error < gradsuite.TOLERANCE, r
