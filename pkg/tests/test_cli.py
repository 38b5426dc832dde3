import subprocess
import sys

import numpy as np
import pytest

from tsanet.cli import blend, main
from tsanet.data.io import read_mask, read_rgb, write_mask


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def data(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", str(tmp_path / "data"), "--sequences", "2", "--frames", "5", "--seed", "3")
    assert code == 0
    return tmp_path / "data"


TINY_FLAGS = ["--widths", "2", "3", "4", "5", "--hidden", "8", "--l-freq", "2", "--scales", "64"]


@pytest.fixture
def ckpt(tmp_path, data, capsys):
    code, _, _ = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "run"), "--iterations", "2", *TINY_FLAGS)
    assert code == 0
    return tmp_path / "run" / "final.tsck"


class TestSynth:
    def test_layout(self, data):
        dirs = sorted(p.name for p in data.iterdir())
        assert dirs == ["seq000", "seq001"]
        for d in dirs:
            for sub in ("frames", "flows", "masks"):
                assert len(list((data / d / sub).glob("*.png"))) == 5

    def test_reproducible_bytes(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "synth", "--out", str(tmp_path / name), "--sequences", "1", "--frames", "3", "--occluders", "true")[0] == 0
        for f in sorted((tmp_path / "a").rglob("*.*")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_bad_resolution(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x"), "--resolution", "50")
        assert code == 1
        assert "multiple of 32" in err

    def test_prints_resolved_config(self, tmp_path, capsys):
        _, out, _ = run(capsys, "synth", "--out", str(tmp_path / "x"), "--sequences", "1", "--frames", "3")
        assert "n_frames=3" in out and "resolution=64" in out


class TestTrain:
    def test_config_file_and_flag_precedence(self, tmp_path, data, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("iterations=1\nlearning_rate=0.5\nseed=4\n")
        code, out, _ = run(
            capsys, "train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(cfg),
            "--learning-rate", "0.001", *TINY_FLAGS,
        )
        assert code == 0
        assert "learning_rate=0.001" in out and "seed=4" in out and "iterations=1" in out
        assert "iter 0 loss" in out

    def test_missing_config_file(self, tmp_path, data, capsys):
        code, _, err = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(tmp_path / "none.cfg"))
        assert code == 2 and "none.cfg" in err

    def test_unknown_flag(self, tmp_path, data, capsys):
        assert run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "r"), "--warp-speed", "9")[0] == 1

    def test_invalid_scale(self, tmp_path, data, capsys):
        assert run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "r"), "--scales", "50")[0] == 1


class TestEval:
    def test_ground_truth_as_prediction(self, tmp_path, data, capsys):
        code, out, _ = run(capsys, "eval", "--pred", str(data), "--data", str(data), "--out", str(tmp_path / "e"))
        assert code == 0
        assert "mean\t1.0000\t1.0000\t1.0000" in out

    def test_checkpoint(self, tmp_path, data, ckpt, capsys):
        code, _, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e"))
        assert code == 0
        assert (tmp_path / "e" / "report.tsv").is_file()
        assert len(list((tmp_path / "e" / "seq000").glob("*.png"))) == 5

    def test_missing_checkpoint(self, tmp_path, data, capsys):
        code, _, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "nope.tsck"), "--data", str(data), "--out", str(tmp_path / "e"))
        assert code == 2

    def test_needs_exactly_one_source(self, tmp_path, data, capsys):
        assert run(capsys, "eval", "--data", str(data), "--out", str(tmp_path / "e"))[0] == 1


class TestInfer:
    @pytest.mark.parametrize("size", [None, (96, 96), (128, 128), (40, 72)])
    def test_sizes(self, tmp_path, data, ckpt, capsys, size):
        extra = ["--size", *map(str, size)] if size else []
        out = tmp_path / "masks"
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--seq", str(data / "seq000"), "--out", str(out), *extra)
        assert code == 0
        m = read_mask(out / "00000.png")
        assert m.shape == (size or (64, 64))

    def test_missing_checkpoint(self, tmp_path, data, capsys):
        code, _, _ = run(capsys, "infer", "--ckpt", str(tmp_path / "x.tsck"), "--seq", str(data / "seq000"), "--out", str(tmp_path / "o"))
        assert code == 2

    def test_corrupt_checkpoint(self, tmp_path, data, capsys):
        (tmp_path / "x.tsck").write_bytes(b"garbage!")
        code, _, err = run(capsys, "infer", "--ckpt", str(tmp_path / "x.tsck"), "--seq", str(data / "seq000"), "--out", str(tmp_path / "o"))
        assert code == 2 and "byte offset" in err


class TestGradcheck:
    def test_sad_only(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--module", "sad")
        assert code == 0
        rows = [l for l in out.splitlines() if l.endswith(" ok") or l.endswith("FAIL")]
        assert rows and all(l.startswith("sad.") for l in rows)

    def test_injected_fault_exits_3(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--module", "tensor", "--inject-fault", "matmul")
        assert code == 3
        assert "FAIL" in out

    def test_unknown_module(self, capsys):
        assert run(capsys, "gradcheck", "--module", "everything")[0] == 1


class TestOverlay:
    def test_formula(self):
        frame = np.array([[[10, 20, 30], [200, 100, 0]]], dtype=np.uint8)
        out = blend(frame, np.array([[1, 0]]))
        np.testing.assert_array_equal(out[0, 0], [132, 10, 15])
        np.testing.assert_array_equal(out[0, 1], frame[0, 1])

    def test_empty_and_full_masks(self, tmp_path, data, capsys):
        seq = data / "seq000"
        for name, value in (("empty", 0), ("full", 1)):
            mdir = tmp_path / name
            mdir.mkdir()
            for p in (seq / "frames").glob("*.png"):
                write_mask(mdir / p.name, np.full((64, 64), value, dtype=np.uint8))
            code, _, _ = run(capsys, "overlay", "--seq", str(seq), "--masks", str(mdir), "--out", str(tmp_path / f"o_{name}"))
            assert code == 0
        frame = np.rint(read_rgb(seq / "frames" / "00000.png") * 255)
        empty = np.rint(read_rgb(tmp_path / "o_empty" / "00000.png") * 255)
        full = np.rint(read_rgb(tmp_path / "o_full" / "00000.png") * 255)
        np.testing.assert_array_equal(empty, frame)
        expected = np.rint(0.5 * frame + 0.5 * np.array([255, 0, 0])[:, None, None])
        np.testing.assert_array_equal(full, expected)

    def test_missing_masks(self, tmp_path, data, capsys):
        code, _, _ = run(capsys, "overlay", "--seq", str(data / "seq000"), "--masks", str(tmp_path / "none"), "--out", str(tmp_path / "o"))
        assert code == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "tsanet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("synth", "train", "eval", "infer", "gradcheck", "overlay"):
        assert sub in proc.stdout


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1
