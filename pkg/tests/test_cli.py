"""CLI harness: determinism of artifacts, validation exit codes, and the
ablation grid structure."""

import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from fsuda.cli import main
from fsuda.episodes import FeaturePool

from conftest import tiny_config


def write_config(tmp_path, name="run.cfg", **overrides):
    base = dict(episodes_per_epoch=3, num_test_tasks=2, workers=1)
    base.update(overrides)
    cfg = tiny_config(**base)
    path = tmp_path / name
    path.write_text(cfg.to_text())
    return path, cfg


class TestTrain:
    def test_byte_identical_reruns(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        for d in ("a", "b"):
            code = main(["train", "--config", str(cfg_path), "--seed", "7",
                         "--out", str(tmp_path / d)])
            assert code == 0
        a = (tmp_path / "a" / "history.ndjson").read_bytes()
        b = (tmp_path / "b" / "history.ndjson").read_bytes()
        assert a == b
        ck_a = (tmp_path / "a" / "checkpoint.e2ck").read_bytes()
        ck_b = (tmp_path / "b" / "checkpoint.e2ck").read_bytes()
        assert ck_a == ck_b

    def test_paper_default_weights_in_digest_block(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        code = main(["train", "--config", str(cfg_path),
                     "--set", "lambda_d=0.01", "--set", "lambda_f=0.01",
                     "--out", str(tmp_path / "out")])
        assert code == 0
        text = (tmp_path / "out" / "config.txt").read_text()
        assert "lambda_d = 0.01" in text
        assert "lambda_f = 0.01" in text
        assert "# digest: " in text

    def test_negative_shot_count_exit_one(self, tmp_path, capsys):
        cfg_path, _ = write_config(tmp_path)
        code = main(["train", "--config", str(cfg_path), "--set", "shot_count=-3"])
        assert code == 1
        assert "shot_count" in capsys.readouterr().err

    def test_unknown_key_exit_one(self, tmp_path, capsys):
        cfg_path, _ = write_config(tmp_path)
        code = main(["train", "--config", str(cfg_path), "--set", "no_such_knob=1"])
        assert code == 1
        assert "no_such_knob" in capsys.readouterr().err

    def test_missing_config_file_exit_one(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 1


class TestEval:
    @pytest.fixture
    def trained(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        out = tmp_path / "train"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        return cfg_path, out / "checkpoint.e2ck"

    def test_eval_writes_reports(self, trained, tmp_path):
        cfg_path, ckpt = trained
        out = tmp_path / "eval"
        code = main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--out", str(out)])
        assert code == 0
        summary = json.loads((out / "eval.json").read_text())
        assert 0.0 <= summary["mean_accuracy"] <= 1.0
        assert summary["config_digest"]
        timing = json.loads((out / "eval.timing.json").read_text())
        assert len(timing["per_task_seconds"]) == summary["num_tasks"]
        csv_lines = (out / "per_task.csv").read_text().splitlines()
        assert csv_lines[1] == "task_id,accuracy"
        assert len(csv_lines) == 2 + summary["num_tasks"]

    def test_single_task_iqr_zero(self, trained, tmp_path):
        cfg_path, ckpt = trained
        out = tmp_path / "eval1"
        code = main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--out", str(out), "--num-tasks", "1"])
        assert code == 0
        assert json.loads((out / "eval.json").read_text())["iqr_accuracy"] == 0.0

    def test_byte_identical_eval_reruns(self, trained, tmp_path):
        cfg_path, ckpt = trained
        outs = []
        for d in ("e1", "e2"):
            assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                         "--out", str(tmp_path / d)]) == 0
            outs.append((tmp_path / d / "eval.json").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_exit_one(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        code = main(["eval", "--config", str(cfg_path),
                     "--checkpoint", str(tmp_path / "nope.e2ck")])
        assert code == 1

    def test_corrupt_checkpoint_exit_one(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        bad = tmp_path / "bad.e2ck"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(bad)]) == 1


class TestGenData:
    def test_files_written_and_loadable(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
        src = FeaturePool.load(out / "source.e2fv", "source")
        assert src.num_samples == cfg.synth_classes * cfg.synth_per_class
        assert src.raw_dim == cfg.raw_dim

    def test_header_fields_via_independent_reader(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
        blob = (out / "target.e2fv").read_bytes()
        magic, version, dtype, has_labels, _, n, d = struct.unpack_from("<4sIBBHQQ", blob)
        assert magic == b"E2FV"
        assert version == 1 and dtype == 1 and has_labels == 1
        assert n == cfg.synth_classes * cfg.synth_per_class
        assert d == cfg.raw_dim

    def test_seed_determinism(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        for d in ("d1", "d2"):
            assert main(["gen-data", "--config", str(cfg_path), "--seed", "5",
                         "--out", str(tmp_path / d)]) == 0
        assert ((tmp_path / "d1" / "source.e2fv").read_bytes()
                == (tmp_path / "d2" / "source.e2fv").read_bytes())


class TestAblate:
    def test_grid_structure_and_shared_seeds(self, tmp_path):
        cfg_path, _ = write_config(tmp_path, episodes_per_epoch=2, num_test_tasks=2)
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", str(cfg_path), "--out", str(out)]) == 0
        rows = json.loads((out / "ablation.json").read_text())
        prompt_rows = [r for r in rows if r["group"] == "prompt"]
        loss_rows = [r for r in rows if r["group"] == "loss"]
        assert len(prompt_rows) == 4
        assert len(loss_rows) == 3
        assert len({r["seed"] for r in rows}) == 1
        csv_text = (out / "ablation.csv").read_text()
        assert csv_text.count("\n") == 8  # header + 7 cells


def test_console_script_runs():
    result = subprocess.run([sys.executable, "-m", "fsuda.cli", "--help"],
                            capture_output=True, text=True)
    assert result.returncode == 0
    assert "train" in result.stdout and "ablate" in result.stdout
