import json
import subprocess
import sys

import pytest

from samil.cli import main

SMALL = {
    "hidden": [16, 8],
    "attention_dim": 4,
    "epochs": 2,
    "patience": 2,
    "batch_size": 8,
    "generator": {"n_train": 18, "n_val": 9, "n_test": 9, "n_pretrain": 3, "k_min": 3, "k_max": 5,
                  "image_size": 8, "seed": 2},
    "pretraining": {"epochs": 1, "queue_size": 8, "knn_k": 3},
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "data.bin")]) == 0
    return tmp_path


def test_full_command_sequence(workdir, capsys):
    cfg, data = str(workdir / "cfg.json"), str(workdir / "data.bin")
    assert main(["pretrain", "--config", cfg, "--dataset", data, "--out", str(workdir / "pre.ckpt")]) == 0
    run = workdir / "run"
    assert main(["train", "--config", cfg, "--dataset", data, "--run-dir", str(run),
                 "--set", "pretrain=bag-cl", "--set", f"pretrain_checkpoint={workdir / 'pre.ckpt'}"]) == 0
    assert (run / "model.ckpt").exists()
    ckpt = str(run / "model.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--dataset", data, "--out", str(workdir / "m.csv"),
                 "--curve", str(workdir / "c.csv")]) == 0
    assert (workdir / "m.csv").read_text() == (run / "metrics.csv").read_text()
    assert main(["audit", "--checkpoint", ckpt, "--dataset", data, "--out", str(workdir / "a.csv")]) == 0
    assert (workdir / "a.csv").read_text() == (run / "audit.csv").read_text()
    capsys.readouterr()
    assert main(["sweep", "--config", cfg, "--dataset", data, "--set", "lambda_sa_grid=[5]",
                 "--set", "tau_v_grid=[0.1,0.05]", "--set", "epochs=1", "--set", "patience=1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("lambda_sa,tau_v") and len(lines) == 3


def test_train_without_run_dir_prints_metrics(workdir, capsys):
    assert main(["train", "--config", str(workdir / "cfg.json"), "--set", "epochs=1", "--set", "patience=1"]) == 0
    assert capsys.readouterr().out.startswith("metric,value\n")


@pytest.mark.parametrize("argv", [
    ["train", "--set", "variant=transformer"],
    ["train", "--set", "no_such_key=1"],
    ["train", "--set", "pretrain=bag-cl"],
    ["train", "--set", "oops"],
    ["eval", "--checkpoint", "missing.ckpt", "--dataset", "missing.bin"],
])
def test_errors_exit_nonzero(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert "error:" in capsys.readouterr().err


def test_corrupt_dataset(workdir, capsys):
    blob = (workdir / "data.bin").read_bytes()
    (workdir / "bad.bin").write_bytes(blob[:-10])
    assert main(["train", "--config", str(workdir / "cfg.json"), "--dataset", str(workdir / "bad.bin")]) == 1
    assert "error:" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "samil", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "pretrain", "train", "eval", "audit", "sweep"):
        assert cmd in out.stdout
    bad = subprocess.run([sys.executable, "-m", "samil", "train", "--set", "epochs=0"], capture_output=True, text=True)
    assert bad.returncode != 0
