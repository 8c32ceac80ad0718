"""Command-line interface: flows, overrides, and exit codes."""

import json
import os

import numpy as np
import pytest

from refbox.cli import main
from refbox.data import load_dataset


TINY_SETS = [
    "--set", "dim=16", "--set", "n_heads=2", "--set", "n_layers=1",
    "--set", "n_text_tokens=2", "--set", "image_size=32", "--set", "stride=8",
    "--set", 'backbone_widths=[8,8,8]', "--set", "epochs=1",
    "--set", "batch_size=8", "--set", "eval_batch_size=16",
]


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = main(["generate-data", "--n", "24", "--val-n", "8", "--seed", "3",
                 "--out", str(out), "--image-size", "32", "--oov-n", "4"])
    assert code == 0
    return out


class TestGenerateData:
    def test_layout(self, cli_data):
        assert (cli_data / "train" / "manifest.jsonl").exists()
        assert (cli_data / "val" / "manifest.jsonl").exists()
        assert (cli_data / "vocab.txt").exists()
        assert (cli_data / "oov" / "manifest.jsonl").exists()
        assert len(load_dataset(cli_data / "train")) == 24
        assert len(load_dataset(cli_data / "val")) == 8

    def test_missing_out_is_validation_error(self):
        assert main(["generate-data", "--n", "4"]) == 1


class TestTrainEval:
    def test_train_then_eval(self, cli_data, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code = main(["train", "--out", str(run_dir),
                     "--set", f"train_data={cli_data / 'train'}",
                     "--set", f"val_data={cli_data / 'val'}", *TINY_SETS])
        assert code == 0
        assert (run_dir / "best.ckpt").exists()
        assert (run_dir / "metrics.jsonl").exists()

        records = tmp_path / "records.jsonl"
        code = main(["eval", "--checkpoint", str(run_dir / "best.ckpt"),
                     "--data", str(cli_data / "val"), "--records", str(records)])
        assert code == 0
        lines = records.read_text().splitlines()
        assert len(lines) == 8
        assert {"index", "iou", "pred", "truth"} <= set(json.loads(lines[0]))

    def test_print_config(self, capsys):
        assert main(["train", "--out", "/tmp/unused", "--print-config"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["lr"] == 1e-4
        assert printed["epochs"] == 24
        assert printed["batch_size"] == 32

    def test_unknown_config_key_fails_validation(self):
        assert main(["train", "--out", "/tmp/unused", "--set", "bogus_key=1"]) == 1

    def test_bad_set_syntax(self):
        assert main(["train", "--out", "/tmp/unused", "--set", "novalue"]) == 1

    def test_missing_data_is_validation_error(self):
        assert main(["train", "--out", "/tmp/unused", "--set", "dim=16",
                     "--set", "n_heads=2"]) == 1

    def test_eval_missing_checkpoint_is_runtime_error(self, cli_data):
        assert main(["eval", "--checkpoint", "/nope.ckpt",
                     "--data", str(cli_data / "val")]) == 2


class TestAblate:
    def test_small_matrix(self, cli_data, tmp_path):
        base = {
            "train_data": str(cli_data / "train"), "val_data": str(cli_data / "val"),
            "dim": 16, "n_heads": 2, "n_layers": 1, "n_text_tokens": 2,
            "image_size": 32, "stride": 8, "backbone_widths": [8, 8, 8],
            "epochs": 1, "batch_size": 8, "eval_batch_size": 16,
        }
        matrix = {"base": base, "cells": [
            {"name": "full", "overrides": {}, "seeds": [0]},
            {"name": "decoder_only",
             "overrides": {"encoder_visual": False, "encoder_textual": False,
                           "fusion": "none"}, "seeds": [0]},
        ]}
        path = tmp_path / "matrix.json"
        path.write_text(json.dumps(matrix))
        out = tmp_path / "ablate"
        assert main(["ablate", "--matrix", str(path), "--out", str(out)]) == 0
        results = json.loads((out / "results.json").read_text())
        assert set(results) == {"full", "decoder_only"}
        for cell in results.values():
            assert cell["errors"] == []
            assert len(cell["accs"]) == 1
        assert (out / "table.txt").exists()

    def test_bad_matrix_file(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{}")
        assert main(["ablate", "--matrix", str(path), "--out", str(tmp_path / "o")]) == 1


class TestGradcheckCommand:
    def test_quick_run(self, capsys):
        assert main(["gradcheck", "--seeds", "1", "--sample", "2"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out


class TestParserBehavior:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_no_command(self):
        assert main([]) == 1
