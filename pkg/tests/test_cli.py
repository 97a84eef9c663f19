"""Command-line surface: option resolution, exit codes, and the full chain."""

import json
import subprocess
import sys

import numpy as np
import pytest

from maskedvit.cli import main
from maskedvit.model import ModelCheckpoint

TINY = [
    "--canvas-size", "512",
    "--region-size", "256",
    "--patch-size", "64",
]
TINY_TRAIN = [
    "--folds", "2",
    "--epochs", "1",
    "--embed-dim", "16",
    "--region-depth", "1",
    "--slide-depth", "1",
    "--num-heads", "2",
    "--mlp-ratio", "2.0",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """A synthesized + preprocessed 10-slide corpus shared by the module."""
    root = tmp_path_factory.mktemp("corpus")
    data = root / "data"
    assert main(["synth", "--out-dir", str(data), "--n-slides", "10", *TINY]) == 0
    assert main(["preprocess", "--data-dir", str(data), *TINY[2:]]) == 0
    return data


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    runs = tmp_path_factory.mktemp("runs")
    rc = main(
        ["train", "--data-dir", str(corpus), "--out-dir", str(runs), *TINY_TRAIN]
    )
    assert rc == 0
    return runs


class TestHelpAndErrors:
    def test_no_args_prints_global_help(self, capsys):
        assert main([]) == 0
        out = capsys.readouterr().out
        assert "synth" in out and "heatmap" in out

    def test_dash_h(self, capsys):
        assert main(["-h"]) == 0
        assert "commands" in capsys.readouterr().out

    def test_command_help_exits_zero(self, capsys):
        assert main(["train", "--help"]) == 0
        assert "--epochs" in capsys.readouterr().out

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "unknown command" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["synth", "--bogus", "1"]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_value_type(self, capsys):
        assert main(["synth", "--n-slides", "plenty"]) == 1
        err = capsys.readouterr().err
        assert "plenty" in err

    def test_bad_choice(self, capsys):
        assert main(["train", "--masking", "sometimes"]) == 1

    def test_missing_input_directory(self, capsys, tmp_path):
        assert main(["preprocess", "--data-dir", str(tmp_path / "void")]) == 1
        assert main(["train", "--data-dir", str(tmp_path / "void")]) == 1
        assert main(["eval", "--runs-dir", str(tmp_path / "void")]) == 1

    def test_installed_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-c", "from maskedvit.cli import run; run()"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "usage" in proc.stdout


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text(
            "# comment line\n"
            "n_slides = 3\n"
            "canvas_size = 512\n"
            "region_size = 256\n"
            "patch_size = 64\n"
        )
        out_a = tmp_path / "a"
        assert main(["synth", "--config", str(cfg), "--out-dir", str(out_a)]) == 0
        manifest = (out_a / "manifest.jsonl").read_text().strip().splitlines()
        assert len(manifest) == 3  # config value used

        out_b = tmp_path / "b"
        rc = main(
            ["synth", "--config", str(cfg), "--out-dir", str(out_b), "--n-slides", "2"]
        )
        assert rc == 0
        manifest = (out_b / "manifest.jsonl").read_text().strip().splitlines()
        assert len(manifest) == 2  # explicit flag beats the config file

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("frobnication = 9\n")
        assert main(["synth", "--config", str(cfg)]) == 1
        assert "frobnication" in capsys.readouterr().err

    def test_config_cannot_set_config(self, tmp_path, capsys):
        cfg = tmp_path / "meta.cfg"
        cfg.write_text("config = other.cfg\n")
        assert main(["synth", "--config", str(cfg)]) == 1

    def test_missing_config_file(self, capsys, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.cfg")]) == 1

    def test_malformed_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        assert main(["synth", "--config", str(cfg)]) == 1
        assert "key = value" in capsys.readouterr().err

    def test_duplicate_key(self, tmp_path, capsys):
        cfg = tmp_path / "dup.cfg"
        cfg.write_text("n_slides = 2\nn_slides = 3\n")
        assert main(["synth", "--config", str(cfg)]) == 1
        assert "duplicate" in capsys.readouterr().err


class TestSynthAndPreprocess:
    def test_synth_is_byte_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "--out-dir", str(out), "--n-slides", "4", *TINY]) == 0
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for rec in (a / "manifest.jsonl").read_text().splitlines():
            rel = json.loads(rec)["mask_path"]
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
            rel = json.loads(rec)["canvas_path"]
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_manifest_paths_are_relative(self, corpus):
        for line in (corpus / "manifest.jsonl").read_text().splitlines():
            rec = json.loads(line)
            assert not rec["mask_path"].startswith("/")
            assert not rec["canvas_path"].startswith("/")
            assert set(rec) == {"slide_id", "mask_path", "canvas_path", "label", "spacing"}

    def test_preprocess_writes_slide_containers(self, corpus):
        slides = sorted((corpus / "preprocessed").glob("*.slide"))
        assert len(slides) == 10

    def test_preprocess_skips_thin_slides_with_warning(self, tmp_path, capsys):
        from PIL import Image

        data = tmp_path / "data"
        assert main(["synth", "--out-dir", str(data), "--n-slides", "2", *TINY]) == 0
        # overwrite slide0000's mask with a nearly empty one: 1 tissue pixel
        rec = json.loads((data / "manifest.jsonl").read_text().splitlines()[0])
        bitmap = np.zeros((512, 512), dtype=np.uint8)
        bitmap[0, 0] = 255
        Image.fromarray(bitmap, mode="L").save(data / rec["mask_path"])
        capsys.readouterr()
        assert main(["preprocess", "--data-dir", str(data), *TINY[2:]]) == 0
        captured = capsys.readouterr()
        assert "skipped" in captured.err and rec["slide_id"] in captured.err
        assert "1 skipped" in captured.out
        remaining = sorted(p.name for p in (data / "preprocessed").glob("*.slide"))
        assert remaining == ["slide0001.slide"]

    def test_synth_impossible_threshold_exits_two(self, tmp_path, capsys):
        rc = main(
            [
                "synth", "--out-dir", str(tmp_path / "x"), "--n-slides", "1",
                "--canvas-size", "512", "--region-size", "512", "--patch-size", "64",
                "--min-tissue", "0.99",
            ]
        )
        assert rc == 2
        assert "runtime failure" in capsys.readouterr().err


class TestTrainEvalHeatmap:
    def test_train_writes_folds_and_checkpoints(self, trained):
        folds_info = json.loads((trained / "folds.json").read_text())
        assert folds_info["k"] == 2 and folds_info["seed"] == 0
        assert len(folds_info["slide_ids"]) == 10
        flat = sorted(i for f in folds_info["folds"] for i in f)
        assert flat == list(range(10))
        names = sorted(p.name for p in trained.glob("*.ckpt"))
        assert names == [
            "fold0.masked.ckpt",
            "fold0.plain.ckpt",
            "fold1.masked.ckpt",
            "fold1.plain.ckpt",
        ]

    def test_checkpoint_meta_records_run(self, trained):
        ckpt = ModelCheckpoint.load(trained / "fold1.masked.ckpt")
        assert ckpt.masking is True
        assert ckpt.meta["fold"] == 1 and ckpt.meta["variant"] == "masked"
        assert ckpt.meta["epochs"] == 1
        assert len(ckpt.meta["history"]) == 1

    def test_variants_share_fold_initialization(self, trained):
        masked = ModelCheckpoint.load(trained / "fold0.masked.ckpt")
        plain = ModelCheckpoint.load(trained / "fold0.plain.ckpt")
        assert masked.config.seed == plain.config.seed

    def test_masking_on_trains_masked_only(self, corpus, tmp_path, capsys):
        runs = tmp_path / "runs"
        rc = main(
            [
                "train", "--data-dir", str(corpus), "--out-dir", str(runs),
                "--masking", "on", *TINY_TRAIN,
            ]
        )
        assert rc == 0
        names = sorted(p.name for p in runs.glob("*.ckpt"))
        assert names == ["fold0.masked.ckpt", "fold1.masked.ckpt"]
        capsys.readouterr()
        rc = main(
            ["eval", "--data-dir", str(corpus), "--runs-dir", str(runs)]
        )
        assert rc == 0
        report = json.loads((runs / "report.json").read_text())
        assert set(report["variants"]) == {"masked"}
        assert "kappa_difference" not in report

    def test_resume_continues_training(self, corpus, tmp_path, capsys):
        runs = tmp_path / "runs"
        base = [
            "train", "--data-dir", str(corpus), "--out-dir", str(runs),
            "--masking", "on", *TINY_TRAIN,
        ]
        assert main(base) == 0
        before = ModelCheckpoint.load(runs / "fold0.masked.ckpt").step
        capsys.readouterr()
        assert main(base + ["--resume"]) == 0
        out = capsys.readouterr().out
        assert "resuming fold 0 masked from step" in out
        after = ModelCheckpoint.load(runs / "fold0.masked.ckpt").step
        assert after == 2 * before

    def test_eval_report_structure_and_determinism(self, corpus, trained, tmp_path, capsys):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            rc = main(
                [
                    "eval", "--data-dir", str(corpus),
                    "--runs-dir", str(trained), "--out-dir", str(out),
                ]
            )
            assert rc == 0
        printed = capsys.readouterr().out
        assert "loaded fold0.masked.ckpt" in printed
        assert "variant" in printed and "mean" in printed  # the table
        report = json.loads((out1 / "report.json").read_text())
        assert set(report["variants"]) == {"masked", "plain"}
        for variant in report["variants"].values():
            assert len(variant["fold_kappas"]) == 2
            assert variant["per_fold"][0]["confusion"] is not None
        diff = report["kappa_difference"]
        assert diff == pytest.approx(
            report["variants"]["masked"]["mean_kappa"]
            - report["variants"]["plain"]["mean_kappa"]
        )
        # machine-readable report identical across reruns; txt holds the wall clock
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
        assert "wall_clock_seconds" in (out1 / "report.txt").read_text()

    def test_eval_detects_dataset_mismatch(self, corpus, trained, tmp_path, capsys):
        clone = tmp_path / "data"
        clone.mkdir()
        pre = clone / "preprocessed"
        pre.mkdir()
        for p in sorted((corpus / "preprocessed").glob("*.slide"))[:-1]:  # drop one
            (pre / p.name).write_bytes(p.read_bytes())
        assert main(["eval", "--data-dir", str(clone), "--runs-dir", str(trained)]) == 1
        assert "do not match" in capsys.readouterr().err

    def test_eval_requires_all_folds_for_a_variant(self, corpus, trained, tmp_path, capsys):
        runs = tmp_path / "runs"
        runs.mkdir()
        (runs / "folds.json").write_bytes((trained / "folds.json").read_bytes())
        name = "fold0.masked.ckpt"
        (runs / name).write_bytes((trained / name).read_bytes())  # fold1 missing
        assert main(["eval", "--data-dir", str(corpus), "--runs-dir", str(runs)]) == 1
        assert "missing some fold checkpoints" in capsys.readouterr().err

    def test_heatmap_outputs(self, corpus, trained, tmp_path, capsys):
        out = tmp_path / "maps"
        rc = main(
            [
                "heatmap", "--data-dir", str(corpus),
                "--checkpoint", str(trained / "fold0.masked.ckpt"),
                "--slide-id", "slide0003",
                "--downsample", "64",
                "--out-dir", str(out),
            ]
        )
        assert rc == 0
        slide_dir = out / "slide0003"
        regions = sorted(slide_dir.glob("region*_x*_y*.png"))
        assert regions, "no region maps written"
        assert (slide_dir / "stitched.png").exists()
        sidecar = json.loads((slide_dir / "stitched.png.json").read_text())
        assert sidecar["provenance"]["variant"] == "masked"
        assert sidecar["provenance"]["slide_id"] == "slide0003"

    def test_heatmap_validation_errors(self, corpus, trained, tmp_path, capsys):
        ckpt = str(trained / "fold0.masked.ckpt")
        assert main(["heatmap", "--data-dir", str(corpus)]) == 1  # no checkpoint
        rc = main(
            [
                "heatmap", "--data-dir", str(corpus), "--checkpoint", ckpt,
                "--slide-id", "slide9999", "--out-dir", str(tmp_path / "x"),
            ]
        )
        assert rc == 1
        rc = main(
            [
                "heatmap", "--data-dir", str(corpus), "--checkpoint", ckpt,
                "--layer", "5", "--out-dir", str(tmp_path / "y"),
            ]
        )
        assert rc == 1
        assert "--layer" in capsys.readouterr().err
