import json
import subprocess
import sys

import numpy as np
import pytest

from dial import __version__
from dial.checkpoint import load_checkpoint
from dial.cli import main

SMALL = """
[dataset]
n_per_class = 20
dim = 4
[train]
max_epochs = 3
batch_size = 16
feature_dim = 4
encoder_hidden = [8]
disc_hidden = [8]
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_grad_check_passes(capsys):
    code, out, _ = run(capsys, "grad-check", "--draws", "2")
    assert code == 0
    name, value = out.splitlines()[-1].split("\t")
    assert name == "max_relative_error" and float(value) < 1e-4


def test_missing_config_is_a_one_line_error(capsys, tmp_path):
    code, out, err = run(capsys, "train", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o"))
    assert code == 2 and out == ""
    assert err.count("\n") == 1 and err.startswith("error: config: cannot read config")


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["train"],
    ["train", "--out", "x", "--variant", "Nope"],
    ["train", "--out", "x", "--start-epoch", "3"],
    ["ablation", "--out", "x", "--seeds", "1,a"],
])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and err.startswith("error: usage:") and err.count("\n") == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_train_eval_export_resume(capsys, config, tmp_path):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--config", config, "--out", str(out), "--seed", "4")
    assert code == 0 and stdout.startswith("epoch 2:")
    lines = (out / "report.jsonl").read_text().splitlines()
    assert [json.loads(ln)["epoch"] for ln in lines] == [0, 1, 2]
    saved = json.loads((out / "config.json").read_text())
    assert saved["train"]["seed"] == 4 and saved["dataset"]["n_per_class"] == 20

    code, stdout, _ = run(capsys, "eval", "--config", config, "--checkpoint", str(out / "model.ckpt"),
                          "--out", str(out / "eval.json"))
    summary = json.loads(stdout)
    assert code == 0 and json.loads((out / "eval.json").read_text()) == summary
    assert np.trace(summary["confusion"]) / np.sum(summary["confusion"]) == pytest.approx(summary["target_test_acc"])

    code, stdout, _ = run(capsys, "export-embeddings", "--config", config, "--checkpoint", str(out / "model.ckpt"),
                          "--out", str(out / "emb.csv"))
    assert code == 0 and stdout.split() == [str(out / "emb.csv")]
    assert len((out / "emb.csv").read_text().splitlines()) == 1 + 4 * 60

    code, _, _ = run(capsys, "train", "--config", config, "--out", str(out), "--seed", "4", "--max-epochs", "5",
                     "--resume", str(out / "model.ckpt"), "--start-epoch", "3")
    assert code == 0
    lines = (out / "report.jsonl").read_text().splitlines()
    assert [json.loads(ln)["epoch"] for ln in lines] == [0, 1, 2, 3, 4]
    load_checkpoint(out / "model.ckpt")


def test_training_report_is_reproducible(capsys, config, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "train", "--config", config, "--out", str(tmp_path / name))[0] == 0
    assert (tmp_path / "a" / "report.jsonl").read_bytes() == (tmp_path / "b" / "report.jsonl").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_timing_flag_adds_wall_time(capsys, config, tmp_path):
    run(capsys, "train", "--config", config, "--out", str(tmp_path), "--timing", "--max-epochs", "1")
    assert "wall_time" in json.loads((tmp_path / "report.jsonl").read_text())


def test_eval_rejects_mismatched_checkpoint(capsys, config, tmp_path):
    run(capsys, "train", "--config", config, "--out", str(tmp_path), "--max-epochs", "1")
    other = tmp_path / "wide.toml"
    other.write_text(SMALL.replace("dim = 4", "dim = 5"))
    code, _, err = run(capsys, "eval", "--config", str(other), "--checkpoint", str(tmp_path / "model.ckpt"))
    assert code == 2 and err.startswith("error: compatibility:")


def test_bad_checkpoint_is_a_format_error(capsys, config, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    code, _, err = run(capsys, "eval", "--config", config, "--checkpoint", str(tmp_path / "bad.ckpt"))
    assert code == 2 and err.startswith("error: format:")


def test_divergence_exits_1(capsys, config, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("max_epochs = 3", 'max_epochs = 5\noptimizer = "sgd_momentum"\nlr = 1e6'))
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--config", str(bad), "--out", str(tmp_path / "o"), "--seed", "1")
    assert code == 1 and err.startswith("error: training:")
    assert (tmp_path / "o" / "report.jsonl").exists()


def test_ablation_runs_every_variant_seed_pair(capsys, config, tmp_path):
    code, stdout, _ = run(capsys, "ablation", "--config", config, "--seeds", "1,2,3", "--max-epochs", "2",
                          "--out", str(tmp_path))
    assert code == 0
    rows = [ln.split("\t") for ln in stdout.splitlines()]
    assert rows[0] == ["variant", "model", "seed1", "seed2", "seed3", "mean", "std"]
    assert len(rows) == 5 and all(len(r) == 7 for r in rows[1:])
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert sum(len(v["target_test_acc"]) for v in doc["variants"]) == 12
    assert (tmp_path / "ablation.tsv").read_text() == stdout


def test_ablation_needs_two_seeds(capsys, config, tmp_path):
    code, _, err = run(capsys, "ablation", "--config", config, "--seeds", "1", "--out", str(tmp_path))
    assert code == 2 and "at least 2 seeds" in err


def test_retention(capsys, config, tmp_path):
    code, stdout, _ = run(capsys, "retention", "--config", config, "--seeds", "1,2", "--max-epochs", "2",
                          "--out", str(tmp_path))
    assert code == 0
    assert (tmp_path / "retention.tsv").exists() and "points" in stdout


def test_gen_data(capsys, config, tmp_path):
    code, stdout, _ = run(capsys, "gen-data", "--config", config, "--out", str(tmp_path))
    assert code == 0 and len(stdout.split()) >= 4
    assert json.loads((tmp_path / "dataset.json").read_text())["dim"] == 4


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "dial", "grad-check", "--draws", "1"], capture_output=True, text=True)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "dial", "train", "--config", str(tmp_path / "nope.toml"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert bad.returncode == 2 and bad.stderr.count("\n") == 1
