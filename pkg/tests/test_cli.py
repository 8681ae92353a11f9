"""End-to-end command-line behaviour: exit codes, file outputs, encodings."""

import json
import os

import numpy as np
import pytest

from mcms.blur import load_image, save_image
from mcms.cli import decode_decomposition, main
from mcms.config import RunConfig, config_from_dict, load_config


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A tiny synthesized dataset shared by the read-only CLI tests."""
    out = str(tmp_path_factory.mktemp("ds"))
    rc = main(["synth", "--out-dir", out, "--n", "2", "--size", "64",
               "--length", "7", "--angle", "30", "--sigma", "0.01", "--seed", "3"])
    assert rc == 0
    return out


class TestUsageErrors:
    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["polish"])
        assert exc.value.code == 2

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])  # --out-dir is required
        assert exc.value.code == 2


class TestFailureExitCode:
    def test_missing_manifest_reports_one_line(self, tmp_path, capsys):
        rc = main(["eval", "--in", str(tmp_path), "--out-dir", str(tmp_path / "o")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert len(err.strip().splitlines()) == 1

    def test_malformed_config_rejected(self, tmp_path, dataset):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["train", "--in", dataset, "--out-dir", str(tmp_path / "o"),
                   "--config", str(bad)])
        assert rc == 1

    def test_unknown_config_key_named_in_error(self, tmp_path, dataset, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": 1e-3}))
        rc = main(["train", "--in", dataset, "--out-dir", str(tmp_path / "o"),
                   "--config", str(bad)])
        assert rc == 1
        assert "learning_rate" in capsys.readouterr().err


class TestSynth:
    def test_layout_and_manifest(self, dataset):
        assert os.path.isdir(os.path.join(dataset, "sharp"))
        manifest = json.load(open(os.path.join(dataset, "manifest.json")))
        assert len(manifest["entries"]) == 2
        for e in manifest["entries"]:
            assert os.path.exists(os.path.join(dataset, e["blurry"]))
            assert os.path.exists(os.path.join(dataset, e["sharp"]))

    def test_deterministic_across_runs(self, tmp_path, dataset):
        again = str(tmp_path / "again")
        main(["synth", "--out-dir", again, "--n", "2", "--size", "64",
              "--length", "7", "--angle", "30", "--sigma", "0.01", "--seed", "3"])
        for name in sorted(os.listdir(os.path.join(dataset, "sharp"))):
            a = load_image(os.path.join(dataset, "sharp", name))
            b = load_image(os.path.join(again, "sharp", name))
            assert np.array_equal(a, b)


class TestDecompose:
    def test_round_trip_within_one_step(self, tmp_path, dataset, rng):
        src = os.path.join(dataset, "sharp", sorted(
            os.listdir(os.path.join(dataset, "sharp")))[0])
        out = str(tmp_path / "planes")
        rc = main(["decompose", "--in", src, "--out-dir", out, "--tau", "0.1"])
        assert rc == 0
        stem = os.path.splitext(os.path.basename(src))[0]
        rebuilt = decode_decomposition(os.path.join(out, f"{stem}_hf.png"),
                                       os.path.join(out, f"{stem}_lf.png"))
        assert np.abs(rebuilt - load_image(src)).max() <= 1.0 / 255.0 + 1e-6

    def test_plane_files_written(self, tmp_path, dataset):
        src = os.path.join(dataset, "sharp", sorted(
            os.listdir(os.path.join(dataset, "sharp")))[0])
        out = str(tmp_path / "planes")
        main(["decompose", "--in", src, "--out-dir", out])
        stem = os.path.splitext(os.path.basename(src))[0]
        assert os.path.exists(os.path.join(out, f"{stem}_hf.png"))
        assert os.path.exists(os.path.join(out, f"{stem}_lf.png"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    """A two-step training run; just enough to produce real artifacts."""
    out = str(tmp_path_factory.mktemp("run"))
    rc = main(["train", "--in", dataset, "--out-dir", out,
               "--steps", "2", "--batch", "2", "--crop", "32", "--seed", "0"])
    assert rc == 0
    return out


class TestTrain:
    def test_artifacts_written(self, trained):
        for name in ("weights.bin", "losses.csv", "metrics.csv", "resolved_config.json"):
            assert os.path.exists(os.path.join(trained, name)), name

    def test_losses_csv_shape(self, trained):
        lines = open(os.path.join(trained, "losses.csv")).read().strip().splitlines()
        assert lines[0] == "epoch,l_hf,l_lf,l_o,l_msfr,l_total"
        # 2 images / batch 2 = 1 step per epoch, 2 steps requested
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "0" and len(first) == 6

    def test_resolved_config_round_trips(self, trained):
        resolved = load_config(os.path.join(trained, "resolved_config.json"))
        assert resolved.steps == 2
        assert resolved.batch == 2
        assert resolved.crop == 32
        rebuilt = config_from_dict(resolved.to_dict())
        assert rebuilt == resolved

    def test_flag_overrides_reach_resolved_config(self, tmp_path, dataset):
        out = str(tmp_path / "abl")
        rc = main(["train", "--in", dataset, "--out-dir", out,
                   "--steps", "1", "--batch", "2", "--crop", "32",
                   "--no-mssa", "--tau", "0.3"])
        assert rc == 0
        resolved = json.load(open(os.path.join(out, "resolved_config.json")))
        assert resolved["model"]["use_mssa"] is False
        assert resolved["model"]["freq_tau"] == 0.3


class TestDeblurEval:
    def test_deblur_writes_restored_png(self, tmp_path, dataset, trained):
        entry = json.load(open(os.path.join(dataset, "manifest.json")))["entries"][0]
        blurry = os.path.join(dataset, entry["blurry"])
        out = str(tmp_path / "restored")
        rc = main(["deblur", "--in", blurry, "--weights",
                   os.path.join(trained, "weights.bin"), "--out-dir", out])
        assert rc == 0
        stem = os.path.splitext(os.path.basename(blurry))[0]
        img = load_image(os.path.join(out, f"{stem}_restored.png"))
        assert img.shape == (3, 64, 64)

    def test_eval_without_weights_matches_baseline(self, tmp_path, dataset, capsys):
        out = str(tmp_path / "metrics")
        rc = main(["eval", "--in", dataset, "--out-dir", out])
        assert rc == 0
        lines = open(os.path.join(out, "metrics.csv")).read().strip().splitlines()
        assert lines[0] == "id,psnr_db,ssim,baseline_psnr_db,baseline_ssim"
        for line in lines[1:]:
            _, p, s, bp, bs = line.split(",")
            assert p == bp and s == bs

    def test_eval_with_weights_runs(self, tmp_path, dataset, trained, capsys):
        out = str(tmp_path / "metrics2")
        rc = main(["eval", "--in", dataset, "--weights",
                   os.path.join(trained, "weights.bin"), "--out-dir", out])
        assert rc == 0
        assert "MEAN" in capsys.readouterr().out

    def test_deblur_odd_size_input(self, tmp_path, trained, rng):
        # deblur must handle sizes that need padding
        src = str(tmp_path / "odd.png")
        save_image(src, rng.uniform(0, 1, (3, 40, 56)).astype(np.float32))
        out = str(tmp_path / "odd_out")
        rc = main(["deblur", "--in", src, "--weights",
                   os.path.join(trained, "weights.bin"), "--out-dir", out])
        assert rc == 0
        assert load_image(os.path.join(out, "odd_restored.png")).shape == (3, 40, 56)


class TestVerificationCommands:
    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "PASS" in out

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "fourier_planes" in out


class TestRunConfig:
    def test_defaults_valid(self):
        RunConfig().validate()

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ValueError, match="model.depth"):
            config_from_dict({"model": {"depth": 9}})

    def test_round_trip(self):
        cfg = RunConfig(lr=2e-4, steps=17)
        assert config_from_dict(cfg.to_dict()) == cfg
