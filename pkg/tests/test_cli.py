import json
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from mmbatch.augment import AugmentPolicy, apply_transform
from mmbatch.cli import RunConfig, load_image_model, load_mm_model, main, parse_config_file, save_mm_model
from mmbatch.data import ImageStore, read_manifest
from mmbatch.errors import ConfigError
from mmbatch.pnm import read_pnm
from mmbatch.tensor import Tensor

SMALL = ["--classes", "4", "--train", "120", "--validation", "40", "--test", "40", "--image-size", "16"]
TRAIN = ["--resize", "18", "--crop", "16", "--epochs", "2", "--batch-size", "32", "--lr", "0.01"]


def run(out, *args):
    return main([args[0], "--out", str(out), *args[1:]])


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run(out, "synth", *SMALL, "--ambiguity", "0") == 0
    assert run(out, "build-vocab") == 0
    assert run(out, "train-text", "--epochs", "20", "--lr", "0.01") == 0
    assert run(out, "pretrain-image", *TRAIN) == 0
    assert run(out, "train-mm", *TRAIN) == 0
    return out


class TestConfig:
    def test_layering(self):
        cfg = RunConfig.build("train-text", {"lr": "0.5", "epochs": "3"}, {"epochs": "4"}, "/o")
        assert (cfg.lr, cfg.epochs, cfg.batch_size) == (0.5, 4, 128)
        assert str(cfg.path("metrics")) == "/o/train-text.jsonl"

    def test_file_format(self):
        vals = parse_config_file("# settings\nlr = 0.01  # fast\n\naugment = per-sample\n")
        assert vals == {"lr": "0.01", "augment": "per-sample"}
        assert RunConfig.build("train-mm", vals, {}, ".").augment == "per_sample"

    @pytest.mark.parametrize("text", ["bogus = 1", "lr 0.1"])
    def test_file_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config_file(text)

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig.build("train-mm", {"rollback": "maybe"}, {}, ".")


class TestExitCodes:
    def test_missing_manifest(self, tmp_path, capsys):
        assert run(tmp_path, "eval") == 2
        assert error_line(capsys) | {"message": ""} == {"error": "missing_input", "exit": 2, "message": ""}

    def test_missing_vocab_for_text_training(self, workdir, tmp_path):
        shutil.copy(workdir / "manifest.csv", tmp_path)
        assert run(tmp_path, "train-text", "--manifest", str(workdir / "manifest.csv")) == 2

    def test_zero_epochs(self, workdir, capsys):
        assert run(workdir, "train-mm", "--epochs", "0", "--metrics", "x.jsonl") == 3
        assert error_line(capsys)["error"] == "config"

    def test_unknown_flag(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--colour", "red"]) == 3

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("colour = red\n")
        assert run(tmp_path, "synth", "--config", str(tmp_path / "c.cfg")) == 3

    def test_missing_config_file(self, tmp_path):
        assert run(tmp_path, "synth", "--config", str(tmp_path / "none.cfg")) == 2

    def test_corrupt_checkpoint_is_runtime_failure(self, workdir, tmp_path):
        (tmp_path / "bad.mmck").write_bytes(b"MMCK\x09\x00")
        assert run(workdir, "eval", "--model", "image", "--image-checkpoint", str(tmp_path / "bad.mmck"),
                   "--metrics", str(tmp_path / "e.jsonl")) == 1

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mmbatch", "eval", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert json.loads(proc.stderr.strip())["exit"] == 2


class TestCommands:
    def test_perfect_text_model(self, workdir, capsys):
        assert run(workdir, "eval", "--model", "text") == 0
        assert capsys.readouterr().out.strip() == "accuracy 1.0"
        record = json.loads((workdir / "eval.jsonl").read_text())
        counts = np.array(record["confusion"])
        assert counts.sum() == 40 and np.trace(counts) == 40

    def test_metrics_final_record(self, workdir):
        lines = [json.loads(l) for l in (workdir / "train-mm.jsonl").read_text().splitlines()]
        assert [l["phase"] for l in lines] == ["train", "validation"] * 2 + ["final"]
        assert lines[-1]["checkpoint"] == "mm.mmck" and 0 <= lines[-1]["best_accuracy"] <= 1
        assert all("wall_time" in l for l in lines)

    def test_cam_heat_maps(self, workdir, capsys):
        assert run(workdir, "cam", "--crop", "16", "--resize", "18", "--cam-samples", "2") == 0
        out = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert len(out) == 2 and len(out[0]["scores"]) == 4
        maps = sorted((workdir / "cam").glob("*.pgm"))
        assert len(maps) == 8
        heat = read_pnm(maps[0])
        assert heat.shape == (1, 16, 16) and heat.min() >= 0 and heat.max() <= 1

    def test_cam_scores_match_head(self, workdir, capsys):
        run(workdir, "cam", "--crop", "16", "--resize", "18")
        record = json.loads(capsys.readouterr().out.splitlines()[0])
        backbone, head = load_image_model(workdir / "image.mmck")
        m = read_manifest(workdir / "manifest.csv")
        pol = AugmentPolicy("none", 18, 16)
        x = apply_transform(ImageStore(m).load(m.records[record["sample"]]), pol.identity_params(), pol)
        logits = head(backbone.features(Tensor(x[None]))).data[0]
        np.testing.assert_allclose(record["scores"], logits, atol=1e-4)

    def test_checkpoint_round_trip(self, workdir, tmp_path):
        backbone, head, kind = load_mm_model(workdir / "mm.mmck")
        save_mm_model(tmp_path / "again.mmck", backbone, head, kind)
        assert (tmp_path / "again.mmck").read_bytes() == (workdir / "mm.mmck").read_bytes()

    def test_idempotent(self, workdir, tmp_path):
        shutil.copy(workdir / "manifest.csv", tmp_path / "manifest.csv")
        for d in ("train", "validation", "test"):
            shutil.copytree(workdir / d, tmp_path / d)
        first = (workdir / "vocab.txt").read_bytes()
        assert run(tmp_path, "build-vocab") == 0
        assert (tmp_path / "vocab.txt").read_bytes() == first
        snapshots = []
        for _ in range(2):
            assert run(tmp_path, "pretrain-image", *TRAIN, "--log-wall-time", "false") == 0
            snapshots.append(((tmp_path / "image.mmck").read_bytes(), (tmp_path / "pretrain-image.jsonl").read_bytes()))
        assert snapshots[0] == snapshots[1]
        assert (tmp_path / "image.mmck").read_bytes() == (workdir / "image.mmck").read_bytes()

    def test_synth_idempotent(self, tmp_path):
        for d in ("a", "b"):
            assert run(tmp_path / d, "synth", *SMALL, "--seed", "3") == 0
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
        assert (tmp_path / "a/test/00007.ppm").read_bytes() == (tmp_path / "b/test/00007.ppm").read_bytes()


@pytest.mark.slow
def test_default_pipeline_under_five_minutes(tmp_path, capsys):
    start = time.perf_counter()
    for cmd in ("synth", "build-vocab", "train-text", "pretrain-image", "train-mm", "eval"):
        assert run(tmp_path, cmd) == 0, cmd
    elapsed = time.perf_counter() - start
    assert capsys.readouterr().out.splitlines()[-1].startswith("accuracy ")
    assert elapsed < 300
