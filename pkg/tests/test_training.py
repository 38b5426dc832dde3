import math

import numpy as np
import pytest
from scipy import ndimage

from tsanet import TSANet, Window, forward_segment, gradsuite
from tsanet.autodiff import Tensor, no_grad
from tsanet.checkpoint import (
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from tsanet.data import SyntheticConfig, generate_synthetic_sequence, rgb_to_flow, save_sequence
from tsanet.errors import CheckpointFormatError, ValidationError
from tsanet.metrics import predict_sequence, score_sequence
from tsanet.model import ModelConfig
from tsanet.training import (
    AdamState,
    TrainConfig,
    adam_step,
    build_window,
    model_from_checkpoint,
    parse_config_text,
    resize_flow,
    resize_mask,
    target_mask,
    train,
    train_on,
)

TINY = dict(widths=(2, 3, 4, 5), hidden=8, l_freq=2)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4
        assert cfg.scales == (64, 96, 128)
        assert cfg.switch_every == 128

    @pytest.mark.parametrize(
        "kwargs",
        [{"scales": (64, 50)}, {"iterations": 0}, {"batch_size": 4}, {"learning_rate": 0.0}, {"scales": ()}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs).validate()

    def test_from_text(self):
        values = parse_config_text("# comment\nlearning_rate = 1e-5\nscales=64 96\ntaf_enabled=false\n\n")
        cfg = TrainConfig.from_dict(values)
        assert cfg.learning_rate == 1e-5
        assert cfg.scales == (64, 96)
        assert cfg.taf_enabled is False

    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="bogus"):
            TrainConfig.from_dict({"bogus": "1"})

    def test_bad_line(self):
        with pytest.raises(ValidationError, match=":2"):
            parse_config_text("seed=1\nnot a pair\n")

    def test_bad_value(self):
        with pytest.raises(ValidationError, match="iterations"):
            TrainConfig.from_dict({"iterations": "many"})

    def test_dict_round_trip(self):
        cfg = TrainConfig(scales=(32, 64), widths=(2, 3, 4, 5), taf_enabled=False)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestAdam:
    def test_zero_gradients_are_identity(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamState()
        for _ in range(3):
            p = adam_step(p, {"w": np.zeros(3)}, state, 1e-2)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])

    def test_first_step_moves_by_lr(self):
        out = adam_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, AdamState(), 1e-3)
        assert (out["w"][0] - 0.5) == pytest.approx(-1e-3, rel=1e-6)

    def test_two_steps_match_hand_calculation(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = np.array([1.0, -1.0])
        g1, g2 = np.array([0.5, -2.0]), np.array([-1.0, 3.0])
        state = AdamState()
        out = adam_step({"w": p}, {"w": g1}, state, lr)
        out = adam_step(out, {"w": g2}, state, lr)
        expected = []
        for i in range(2):
            m = v = 0.0
            x = p[i]
            for step, g in enumerate((g1[i], g2[i]), start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                x -= lr * (m / (1 - b1**step)) / (math.sqrt(v / (1 - b2**step)) + eps)
            expected.append(x)
        np.testing.assert_allclose(out["w"], expected, rtol=0, atol=1e-15)
        assert state.step == 2

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(ValidationError, match="enc.w"):
            adam_step({"enc.w": np.ones(2)}, {"enc.w": np.array([1.0, np.nan])}, AdamState(), 1e-3)

    def test_missing_gradient_skipped(self):
        out = adam_step({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2), "b": None}, AdamState(), 0.1)
        np.testing.assert_array_equal(out["b"], 1.0)
        assert not np.array_equal(out["a"], np.ones(2))

    def test_moment_shapes_follow_parameters(self):
        state = AdamState()
        adam_step({"w": np.ones((2, 3))}, {"w": np.ones((2, 3))}, state, 0.1)
        assert state.m["w"].shape == state.v["w"].shape == (2, 3)


def random_checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    params = {"a.weight": rng.normal(size=(3, 2, 3, 3)).astype(np.float32), "a.bias": rng.normal(size=3).astype(np.float32)}
    return Checkpoint(
        params=params,
        adam_m={k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.items()},
        adam_v={k: rng.uniform(size=v.shape).astype(np.float32) for k, v in params.items()},
        adam_step=17,
        iteration=17,
        config={"seed": 3, "note": "ünïcode"},
    )


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        ck = random_checkpoint()
        save_checkpoint(ck, tmp_path / "c.tsck")
        back = load_checkpoint(tmp_path / "c.tsck")
        for ours, theirs in ((ck.params, back.params), (ck.adam_m, back.adam_m), (ck.adam_v, back.adam_v)):
            assert ours.keys() == theirs.keys()
            for k in ours:
                assert ours[k].tobytes() == theirs[k].tobytes() and ours[k].shape == theirs[k].shape
        assert (back.iteration, back.adam_step, back.config) == (17, 17, ck.config)
        assert encode_checkpoint(back) == encode_checkpoint(ck)

    def test_header_layout(self):
        raw = encode_checkpoint(random_checkpoint())
        assert raw[:4] == b"TSCK"
        assert int.from_bytes(raw[4:8], "little") == 1
        # 2 params + 2 first moments + 2 second moments + 3 meta entries
        assert int.from_bytes(raw[8:12], "little") == 9
        name_len = int.from_bytes(raw[12:14], "little")
        assert raw[14 : 14 + name_len] == b"a.weight"

    @pytest.mark.parametrize("cut", [3, 10, 13, 40, -1])
    def test_truncated(self, cut):
        raw = encode_checkpoint(random_checkpoint())
        with pytest.raises(CheckpointFormatError, match="byte offset"):
            decode_checkpoint(raw[:cut])

    def test_foreign_magic(self):
        raw = encode_checkpoint(random_checkpoint())
        with pytest.raises(CheckpointFormatError, match="magic"):
            decode_checkpoint(b"PK\x03\x04" + raw[4:])

    def test_unknown_version(self):
        raw = bytearray(encode_checkpoint(random_checkpoint()))
        raw[4] = 9
        with pytest.raises(CheckpointFormatError, match="version"):
            decode_checkpoint(bytes(raw))

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            decode_checkpoint(encode_checkpoint(random_checkpoint()) + b"\0")

    def test_load_error_names_file(self, tmp_path):
        (tmp_path / "bad.tsck").write_bytes(b"TSCK")
        with pytest.raises(CheckpointFormatError, match="bad.tsck"):
            load_checkpoint(tmp_path / "bad.tsck")

    def test_missing_file_is_os_error(self, tmp_path):
        with pytest.raises(OSError, match="missing.tsck"):
            load_checkpoint(tmp_path / "missing.tsck")


def toy_window(rng, size=32, dtype=np.float64):
    frames = tuple(Tensor(rng.uniform(0, 1, (1, 3, size, size)).astype(dtype)) for _ in range(3))
    flows = tuple(Tensor(rng.uniform(0, 1, (1, 3, size, size)).astype(dtype)) for _ in range(3))
    return Window(frames, flows)


class TestForward:
    @pytest.mark.parametrize("taf,sad", [(True, True), (False, True), (True, False), (False, False)])
    def test_output_shape(self, taf, sad):
        model = TSANet(ModelConfig(**TINY, taf_enabled=taf, sad_enabled=sad), seed=0, dtype=np.float64)
        with no_grad():
            out = forward_segment(model, toy_window(np.random.default_rng(0)))
        assert out.shape == (1, 2, 32, 32)

    def test_pure(self):
        model = TSANet(ModelConfig(**TINY), seed=0, dtype=np.float64)
        w = toy_window(np.random.default_rng(1))
        with no_grad():
            assert forward_segment(model, w).data.tobytes() == forward_segment(model, w).data.tobytes()

    def test_resolution_mismatch(self):
        model = TSANet(ModelConfig(**TINY), seed=0, dtype=np.float64)
        w = toy_window(np.random.default_rng(2))
        bad = Window(w.frames, (w.flows[0], Tensor(np.zeros((1, 3, 64, 64))), w.flows[2]))
        with pytest.raises(ValidationError):
            forward_segment(model, bad)

    def test_taf_disabled_ignores_neighbours(self):
        model = TSANet(ModelConfig(**TINY, taf_enabled=False), seed=0, dtype=np.float64)
        rng = np.random.default_rng(3)
        a, b = toy_window(rng), toy_window(rng)
        mixed = Window((b.frames[0], a.frames[1], b.frames[2]), (b.flows[0], a.flows[1], b.flows[2]))
        with no_grad():
            np.testing.assert_array_equal(forward_segment(model, a).data, forward_segment(model, mixed).data)

    def test_full_pipeline_gradients(self):
        for r in gradsuite.run_suite("training"):
            assert r.error < gradsuite.TOLERANCE, r


class TestWindows:
    def test_resize_mask_nearest(self):
        m = np.zeros((32, 32), dtype=np.uint8)
        m[8:16, 8:16] = 1
        up = resize_mask(m, 64, 64)
        assert up.sum() == 4 * m.sum()
        assert set(np.unique(up)) == {0, 1}

    def test_resize_flow_scales_displacement(self):
        seq = generate_synthetic_sequence(SyntheticConfig(velocity_range=(2, 2), distractors=0, n_frames=3), 0)
        big = resize_flow(seq.flows[0], seq.max_mag, 128, 128)
        dx, _ = rgb_to_flow(big, seq.max_mag)
        fg = resize_mask(seq.masks[0], 128, 128).astype(bool)
        inner = ndimage.binary_erosion(fg, iterations=3)  # away from the blended rim
        step = seq.meta["displacement"][0][0]
        np.testing.assert_allclose(dx[inner], 2 * step, atol=1e-9)

    def test_build_window_clamps(self):
        seq = generate_synthetic_sequence(SyntheticConfig(n_frames=3), 0)
        w = build_window(seq, 0, (32, 32))
        assert w.frames[0].data.tobytes() == w.frames[1].data.tobytes()
        assert w.frames[0].shape == (1, 3, 32, 32)
        assert target_mask(seq, 0, (32, 32)).shape == (32, 32)


def tiny_cfg(**kwargs):
    base = dict(iterations=6, scales=(32, 64), checkpoint_every=4, learning_rate=1e-3, **TINY)
    base.update(kwargs)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return [[generate_synthetic_sequence(SyntheticConfig(n_frames=4), s) for s in range(2)]]


class TestTrainLoop:
    def test_initial_loss_near_ln2(self):
        seqs = [[generate_synthetic_sequence(SyntheticConfig(), s) for s in range(2)]]
        _, losses = train_on(TrainConfig(iterations=1, scales=(64,)), seqs)
        assert 0.3 <= losses[0] <= 1.4

    def test_deterministic(self, tiny_data, tmp_path):
        a, _ = train_on(tiny_cfg(), tiny_data, tmp_path / "a")
        b, _ = train_on(tiny_cfg(), tiny_data, tmp_path / "b")
        assert (tmp_path / "a" / "final.tsck").read_bytes() == (tmp_path / "b" / "final.tsck").read_bytes()
        assert encode_checkpoint(a) == encode_checkpoint(b)

    def test_outputs(self, tiny_data, tmp_path):
        ck, losses = train_on(tiny_cfg(), tiny_data, tmp_path)
        lines = (tmp_path / "loss.log").read_text().splitlines()
        assert len(lines) == 6
        for k, line in enumerate(lines):
            word, idx, word2, value = line.split()
            assert (word, int(idx), word2) == ("iter", k, "loss")
            assert float(value) == pytest.approx(losses[k], abs=1e-6)
        assert (tmp_path / "ckpt_000004.tsck").is_file()
        assert load_checkpoint(tmp_path / "ckpt_000004.tsck").iteration == 4
        assert ck.iteration == 6 and ck.adam_step == 6

    def test_checkpoint_restores_model(self, tiny_data, tmp_path):
        ck, _ = train_on(tiny_cfg(), tiny_data, tmp_path)
        model = model_from_checkpoint(load_checkpoint(tmp_path / "final.tsck"))
        for name, arr in ck.params.items():
            assert model.params[name].data.tobytes() == arr.tobytes()

    def test_train_from_disk(self, tmp_path):
        for s in range(2):
            save_sequence(generate_synthetic_sequence(SyntheticConfig(n_frames=3), s), tmp_path / "data" / f"s{s}")
        ck, losses = train(tiny_cfg(iterations=2), tmp_path / "data", tmp_path / "out")
        assert len(losses) == 2 and (tmp_path / "out" / "final.tsck").is_file()

    def test_missing_data_root(self, tmp_path):
        with pytest.raises(OSError, match="nowhere"):
            train(tiny_cfg(), tmp_path / "nowhere", tmp_path / "out")


@pytest.fixture(scope="module")
def overfit_run():
    seq = generate_synthetic_sequence(SyntheticConfig(), [0, 0])
    cfg = TrainConfig(iterations=500, scales=(64,), learning_rate=5e-4)
    ck, losses = train_on(cfg, [[seq]])
    return seq, model_from_checkpoint(ck), np.array(losses)


@pytest.mark.slow
class TestOverfit:
    """One default synthetic sequence, 500 iterations at 64x64, learning rate 5e-4."""

    @pytest.fixture
    def run(self, overfit_run):
        return overfit_run

    def test_initial_loss_near_ln2(self, run):
        _, _, losses = run
        assert 0.3 <= losses[0] <= 1.4
        assert losses[0] == pytest.approx(0.6983, abs=0.01)  # frozen from the first run

    def test_training_j(self, run):
        seq, model, _ = run
        j = np.mean(score_sequence(predict_sequence(model, seq), seq)[0])
        assert j >= 0.95
        assert j == pytest.approx(0.9655, abs=0.02)  # frozen from the first run

    def test_moving_average_never_rises(self, run):
        _, _, losses = run
        blocks = losses.reshape(-1, 50).mean(axis=1)
        assert np.all(np.diff(blocks) <= 0), blocks
