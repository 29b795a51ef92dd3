import json
import math
import subprocess
import sys

import pytest

from ptnlab.cli import main

TINY = {
    "seed": 3,
    "dataset": {"counts": {"D_r": 10, "D_s": 4, "val": 6, "test": 6}, "size": 32},
    "classifier": {"input_size": 32, "epochs": 2},
    "distill": {"finetune_epochs": 1, "retrain_epochs": 1, "max_rounds": 2, "tolerance": -1.0},
}


def write_config(path, **over):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json", out=str(root / "out"))
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--ptn", "off"]) == 0
    assert main(["train", "--config", str(cfg), "--ptn", "on"]) == 0
    return cfg, root / "out"


def test_generate_prints_summary(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", out=str(tmp_path / "o"))
    assert main(["generate", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in out[1:5]] == ["D_r", "D_s", "val", "test"]
    assert (tmp_path / "o" / "config.generate.json").exists()


def test_generate_same_seed_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "data" / "manifest.csv").read_bytes()
    assert a == (tmp_path / "b" / "data" / "manifest.csv").read_bytes()


def test_zero_test_count_fails(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", out=str(tmp_path / "o"),
                       dataset={"counts": {"D_r": 4, "D_s": 2, "val": 2, "test": 0}, "size": 32})
    assert main(["generate", "--config", str(cfg)]) != 0
    assert "test" in capsys.readouterr().err


def test_unknown_config_key_fails(tmp_path):
    cfg = write_config(tmp_path / "c.json", bogus=1)
    assert main(["generate", "--config", str(cfg)]) != 0


def test_missing_config_file_fails(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) != 0


def test_train_outputs(trained):
    _, out = trained
    for name in ("baseline", "ptn"):
        assert (out / "checkpoints" / f"{name}.ckpt").exists()
        assert (out / "metrics" / f"{name}_loss.csv").read_text().startswith("epoch,loss\n")
        acc = json.loads((out / "metrics" / f"{name}_val.json").read_text())["accuracy"]
        assert 0.0 <= acc <= 1.0
    header = (out / "predictions" / "ptn_slopes_val.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 1 + 12


def test_eval_is_deterministic(trained, capsys):
    cfg, out = trained
    args = ["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoints" / "baseline.ckpt"),
            "--split", "test"]
    assert main(args) == 0
    first = (out / "metrics" / "baseline_test.json").read_bytes()
    assert main(args) == 0
    assert (out / "metrics" / "baseline_test.json").read_bytes() == first


def test_eval_missing_checkpoint_fails(trained):
    cfg, out = trained
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "nope.ckpt")]) != 0


def test_distill_zero_rounds_keeps_metrics(trained):
    cfg, out = trained
    assert main(["distill", "--config", str(cfg), "--rounds", "0"]) == 0
    rounds = json.loads((out / "metrics" / "distill_soft_rounds.json").read_text())
    ptn_val = json.loads((out / "metrics" / "ptn_val.json").read_text())
    assert rounds["val_metrics"][0]["accuracy"] == ptn_val["accuracy"]
    assert rounds["val_metrics"][0]["dauc"] == ptn_val["dauc"]
    assert (out / "audit" / "distill_soft.jsonl").read_text() == ""


@pytest.mark.parametrize("mode", ["soft", "hard"])
def test_distill_audit_line_count(trained, mode):
    cfg, out = trained
    assert main(["distill", "--config", str(cfg), "--mode", mode]) == 0
    info = json.loads((out / "metrics" / f"distill_{mode}_rounds.json").read_text())
    lines = (out / "audit" / f"distill_{mode}.jsonl").read_text().splitlines()
    assert len(lines) == info["rounds_run"] * math.ceil(0.25 * TINY["dataset"]["counts"]["D_r"])
    assert info["ds_labels_unchanged"]


def test_distill_missing_checkpoint_fails(tmp_path, trained, capsys):
    cfg, _ = trained
    assert main(["distill", "--config", str(cfg), "--checkpoint", str(tmp_path / "x.ckpt")]) != 0
    assert "checkpoint" in capsys.readouterr().err


def test_bad_thread_env_fails(trained, monkeypatch):
    cfg, _ = trained
    monkeypatch.setenv("PTNLAB_THREADS", "zero")
    assert main(["generate", "--config", str(cfg), "--out", "/tmp/unused-ptnlab"]) != 0


def test_reproduce_one_seed(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", out=str(tmp_path / "o"))
    assert main(["reproduce", "--config", str(cfg), "--seeds", "7"]) == 0
    md = (tmp_path / "o" / "report.md").read_text()
    for title in ("| Baseline |", "| PTN |", "| PTN + hard labeling |", "| PTN + label distillation |"):
        assert title in md
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["failures"] == [] and rep["seeds"] == [7]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "ptnlab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "train", "distill", "eval", "reproduce"):
        assert cmd in res.stdout
