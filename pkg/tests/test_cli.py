import csv
import io
import json

import numpy as np
import pytest

from rsfactor.cli import build_parser, main
from rsfactor.factorize import ParamVector
from rsfactor.fusion import BilateralConfig, FusionConfig
from rsfactor.image import Image
from rsfactor.io import read_image, write_image
from rsfactor.synth import SynthConfig, synth_dataset
from rsfactor.train import CHECKPOINT_VERSION, TrainConfig, load_checkpoint, save_checkpoint


@pytest.fixture
def dark_png(tmp_path):
    low = synth_dataset(1, 21, SynthConfig(height=32, width=32))[0][0]
    path = tmp_path / "dark.png"
    write_image(path, low, bits=16)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def metrics_rows(path):
    return list(csv.reader(io.StringIO(path.read_text())))


class TestParser:
    def test_help_lists_defaults(self, capsys):
        assert run("enhance", "--help") == 0
        out = capsys.readouterr().out
        for flag in ("--config", "--k", "--t", "--checkpoint", "--mode", "--weights", "--jobs",
                     "--seed", "--outdir", "--luma", "--bits"):
            assert flag in out
        assert "(default: 5)" in out and "(default: 2)" in out and "(default: analog)" in out

    def test_unknown_command(self):
        assert run("explode") == 1

    def test_bad_flag_value(self, dark_png):
        assert run("factorize", dark_png, "--k", "0") == 1

    def test_unknown_config_key(self, tmp_path, dark_png):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"lerning_rate": 0.1}))
        assert run("factorize", dark_png, "--config", cfg, "--outdir", tmp_path / "o") == 1
        assert not (tmp_path / "o").exists()

    def test_flags_override_config(self, tmp_path):
        from rsfactor.cli import resolve_settings

        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"k_factors": 3, "seed": 9}))
        _, s = resolve_settings(["synth", "--config", str(cfg), "--seed", "4"])
        assert s["k_factors"] == 3 and s["seed"] == 4
        _, s = resolve_settings(["synth"])
        assert s["k_factors"] == 5 and s["seed"] == 2

    def test_bad_log_level(self, monkeypatch):
        monkeypatch.setenv("RSFACTOR_LOG", "loud")
        assert run("synth", "--help") == 1

    def test_parser_builds(self):
        assert build_parser().prog == "rsfactor"


class TestFactorize:
    def test_default_five_files(self, tmp_path, dark_png):
        assert run("factorize", dark_png, "--outdir", tmp_path / "o") == 0
        names = sorted(p.name for p in (tmp_path / "o").iterdir())
        assert names == [f"dark_E{k}.png" for k in range(1, 6)] + ["dark_meta.json"]
        meta = json.loads((tmp_path / "o" / "dark_meta.json").read_text())
        assert [layer["nu"] for layer in meta["layers"]] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])

    def test_k1_is_rescaled_input(self, tmp_path, dark_png):
        assert run("factorize", dark_png, "--k", 1, "--outdir", tmp_path / "o") == 0
        src = read_image(dark_png).data.astype(np.float64)
        out = read_image(tmp_path / "o" / "dark_E1.png").data
        expected = (src - src.min()) / (src.max() - src.min())
        assert np.abs(out - expected).max() <= 0.5 / 255 + 1e-6

    def test_bit_identical_reruns(self, tmp_path, dark_png):
        for d in ("a", "b"):
            assert run("factorize", dark_png, "--differences", "--residual", "--outdir", tmp_path / d) == 0
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_unreadable(self, tmp_path, capsys):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        assert run("factorize", bad, "--outdir", tmp_path / "o") == 2
        assert "bad.png" in capsys.readouterr().err

    def test_k_conflicts_with_checkpoint(self, tmp_path, dark_png):
        ck = save_checkpoint(tmp_path / "c.json", ParamVector.initial(3))
        assert run("factorize", dark_png, "--checkpoint", ck, "--k", 4, "--outdir", tmp_path / "o") == 1
        assert run("factorize", dark_png, "--checkpoint", ck, "--outdir", tmp_path / "o") == 0
        assert len(list((tmp_path / "o").glob("dark_E*.png"))) == 3


class TestEnhance:
    def test_identity_checkpoint(self, tmp_path):
        img = Image(np.random.default_rng(0).random((20, 20, 3)))
        write_image(tmp_path / "in.png", img)
        fc = FusionConfig.default(5, bilateral=BilateralConfig(window=1))
        ck = save_checkpoint(tmp_path / "id.json", ParamVector.initial(), fc)
        assert run("enhance", tmp_path / "in.png", "--checkpoint", ck, "--outdir", tmp_path / "o") == 0
        assert np.array_equal(read_image(tmp_path / "o" / "in.png").data, read_image(tmp_path / "in.png").data)

    def test_demo_checkpoint_brightens(self, tmp_path, dark_png):
        assert abs(read_image(dark_png).data.mean() - 0.05) < 0.02
        assert run("enhance", dark_png, "--outdir", tmp_path / "o") == 0
        assert read_image(tmp_path / "o" / "dark.png").data.mean() > 0.25

    def test_directory_of_three(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        (src / "nested").mkdir()
        pairs = synth_dataset(3, 1, SynthConfig(height=24, width=24))
        for i, (low, _) in enumerate(pairs):
            write_image((src / "nested" if i == 2 else src) / f"im{i}.png", low)
        assert run("enhance", src, "--outdir", tmp_path / "o") == 0
        outs = sorted(str(p.relative_to(tmp_path / "o")) for p in (tmp_path / "o").rglob("*.png"))
        assert outs == ["im0.png", "im1.png", "nested/im2.png"]

    def test_jobs_do_not_change_bytes(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        for i, (low, _) in enumerate(synth_dataset(3, 2, SynthConfig(height=24, width=24))):
            write_image(src / f"im{i}.png", low)
        assert run("enhance", src, "--outdir", tmp_path / "a", "--jobs", 1) == 0
        assert run("enhance", src, "--outdir", tmp_path / "b", "--jobs", 2, "--bits", 8) == 0
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_version_mismatch(self, tmp_path, dark_png, capsys):
        ck = save_checkpoint(tmp_path / "c.json", ParamVector.initial())
        d = json.loads(ck.read_text())
        d["format_version"] = CHECKPOINT_VERSION + 1
        ck.write_text(json.dumps(d))
        assert run("enhance", dark_png, "--checkpoint", ck, "--outdir", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert f"expected {CHECKPOINT_VERSION}" in err and f"found {CHECKPOINT_VERSION + 1}" in err
        assert not (tmp_path / "o").exists()

    def test_running_average_mode_and_weights(self, tmp_path, dark_png):
        args = ("--mode", "running_average", "--weights", "1,4,4,4,4,4", "--outdir", tmp_path / "o")
        assert run("enhance", dark_png, *args) == 0
        out = read_image(tmp_path / "o" / "dark.png").data
        assert out.min() >= 0 and out.max() <= 1

    def test_wrong_weight_count(self, tmp_path, dark_png):
        assert run("enhance", dark_png, "--weights", "1,2", "--outdir", tmp_path / "o") == 1

    def test_missing_input(self, tmp_path):
        assert run("enhance", tmp_path / "nope", "--outdir", tmp_path / "o") == 2


class TestTrain:
    def small_data(self, tmp_path, count=2):
        assert run("synth", "--count", count, "--size", 16, "--seed", 3, "--outdir", tmp_path / "data") == 0
        return tmp_path / "data"

    def write_cfg(self, tmp_path, **kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"exposure_window": 8, "batch_size": 2, **kw}))
        return path

    def test_zero_epochs_is_initialization(self, tmp_path):
        data = self.small_data(tmp_path)
        cfg = self.write_cfg(tmp_path, epochs=0, freeze_epoch=0)
        assert run("train", data, "--config", cfg, "--outdir", tmp_path / "o") == 0
        pv, fc, raw = load_checkpoint(tmp_path / "o" / "checkpoint.json")
        init = TrainConfig()
        assert np.array_equal(pv.to_vector(), init.initial_params().to_vector())
        assert fc == init.initial_fusion()
        assert (tmp_path / "o" / "history.csv").read_text().strip() == "epoch,phase,L_f,L_c,L_e,L_s,total"

    def test_phase_transition_row(self, tmp_path):
        data = self.small_data(tmp_path)
        cfg = self.write_cfg(tmp_path, epochs=27, learning_rate=0.0, gamma_learning_rate=0.0)
        assert run("train", data, "--config", cfg, "--outdir", tmp_path / "o") == 0
        rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "history.csv").read_text())))
        assert [r["phase"] for r in rows] == ["1"] * 25 + ["2"] * 2

    def test_byte_identical_checkpoints(self, tmp_path):
        data = self.small_data(tmp_path)
        cfg = self.write_cfg(tmp_path, epochs=2, freeze_epoch=1)
        for d in ("a", "b"):
            assert run("train", data, "--config", cfg, "--outdir", tmp_path / d) == 0
        assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    def test_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("train", tmp_path / "empty", "--outdir", tmp_path / "o") == 2
        assert not (tmp_path / "o").exists()

    def test_invalid_config(self, tmp_path):
        data = self.small_data(tmp_path)
        cfg = self.write_cfg(tmp_path, epochs=3, freeze_epoch=9)
        assert run("train", data, "--config", cfg, "--outdir", tmp_path / "o") == 1


class TestEval:
    def write_pairs(self, tmp_path, preds, gts):
        for sub, imgs in (("pred", preds), ("gt", gts)):
            (tmp_path / sub).mkdir(exist_ok=True)
            for name, arr in imgs.items():
                write_image(tmp_path / sub / f"{name}.png", Image(arr), bits=16)
        return tmp_path / "pred", tmp_path / "gt"

    def test_identical(self, tmp_path):
        x = np.random.default_rng(0).random((16, 16, 3))
        pred, gt = self.write_pairs(tmp_path, {"a": x}, {"a": x})
        assert run("eval", pred, gt, "--outdir", tmp_path / "o") == 0
        rows = metrics_rows(tmp_path / "o" / "metrics.csv")
        assert rows[1][1] == "inf" and rows[1][2] == "inf" and float(rows[1][3]) == 1.0

    def test_uniform_error(self, tmp_path):
        gt = np.full((16, 16, 3), 0.4)
        pred, gtd = self.write_pairs(tmp_path, {"a": gt + 0.1}, {"a": gt})
        assert run("eval", pred, gtd, "--outdir", tmp_path / "o") == 0
        rows = metrics_rows(tmp_path / "o" / "metrics.csv")
        # 16-bit quantization of 0.4 and 0.5 moves the error by < 1e-5
        assert abs(float(rows[1][2]) - 20.0) < 1e-3

    def test_three_pairs_four_rows(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        imgs = {f"p{i}": rng.random((16, 16, 3)) for i in range(3)}
        noisy = {k: np.clip(v + 0.05, 0, 1) for k, v in imgs.items()}
        pred, gt = self.write_pairs(tmp_path, noisy, imgs)
        assert run("eval", pred, gt, "--outdir", tmp_path / "o", "--luma", "digital") == 0
        rows = metrics_rows(tmp_path / "o" / "metrics.csv")
        assert len(rows) == 5 and rows[-1][0] == "mean"
        assert capsys.readouterr().out == (tmp_path / "o" / "metrics.csv").read_text()

    def test_missing_counterpart(self, tmp_path, capsys):
        x = np.zeros((16, 16, 3))
        pred, gt = self.write_pairs(tmp_path, {"a": x, "b": x}, {"a": x, "c": x})
        assert run("eval", pred, gt, "--outdir", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert "b" in err and "c" in err
        assert not (tmp_path / "o").exists()


class TestSynth:
    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth", "--count", 2, "--size", 24, "--outdir", tmp_path / d) == 0
        for p in (tmp_path / "a").rglob("*.png"):
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()

    def test_stems_and_darkness(self, tmp_path):
        assert run("synth", "--count", 3, "--size", 24, "--seed", 8, "--outdir", tmp_path) == 0
        low = sorted(p.name for p in (tmp_path / "low").iterdir())
        assert low == sorted(p.name for p in (tmp_path / "high").iterdir()) and len(low) == 3
        for name in low:
            means = read_image(tmp_path / "low" / name).data.reshape(-1, 3).mean(axis=0)
            assert np.all((means >= 0.03) & (means <= 0.08))

    def test_too_small(self, tmp_path):
        assert run("synth", "--size", 8, "--outdir", tmp_path) == 1
