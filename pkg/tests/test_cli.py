import json
import os

import numpy as np
import pytest

from cosam import checkpoint
from cosam.cli import main

SMALL = ["--set", "data.num_ids=8", "--set", "data.snippets_per_id=4", "--set", "batch.P=2",
         "--set", "data.height=32", "--set", "data.width=16"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    out = root / "a"
    assert main(["train", *SMALL, "--steps", "4", "--out", str(out)]) == 0
    return out


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--steps", "many"]) == 1
    assert "cosam" in capsys.readouterr().err


def test_validation_errors(tmp_path, capsys):
    assert main(["train", "--set", "cosam.K=7", "--out", str(tmp_path)]) == 2
    assert main(["train", "--set", "nosuch.key=1", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert main(["profile", "--geometry", "1,2,3"]) == 2
    assert main(["gradcheck", "--only", "nonsense"]) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    bad = tmp_path / "broken.ckpt"
    bad.write_bytes(b"COSAMCKPT1\n" + (5).to_bytes(8, "little") + b"#meta")
    assert main(["eval", "--checkpoint", str(bad)]) == 3


def test_train_artifacts(trained):
    for name in ("run.json", "loss.log", "model.ckpt", "metrics.json", "metrics.txt"):
        assert (trained / name).is_file()
    run = json.loads((trained / "run.json").read_text())
    assert {"config", "config_hash", "seed", "versions"} <= set(run)
    assert run["config"]["optim"]["steps"] == 4
    lines = (trained / "loss.log").read_text().splitlines()
    assert len(lines) == 4 and all(k in lines[0] for k in ("step=0", "total=", "ce=", "triplet="))
    report = json.loads((trained / "metrics.json").read_text())
    assert report["config_hash"] == run["config_hash"]
    assert {"cmc@1", "cmc@5", "cmc@20", "mAP", "coverage"} <= set(report["metrics"])
    txt = dict(line.split("=", 1) for line in (trained / "metrics.txt").read_text().splitlines())
    assert float(txt["mAP"]) == report["metrics"]["mAP"]
    _, meta = checkpoint.load(trained / "model.ckpt")
    assert meta["config_hash"] == run["config_hash"]


def test_eval_from_checkpoint_matches_in_process(trained):
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt")]) == 0
    a = json.loads((trained / "metrics.json").read_text())
    b = json.loads((trained / "eval" / "metrics.json").read_text())
    assert a["metrics"] == b["metrics"]


def test_run_record_reproduces_run(trained, tmp_path):
    run = json.loads((trained / "run.json").read_text())
    cfg = tmp_path / "from_record.yaml"
    import yaml

    cfg.write_text(yaml.safe_dump(run["config"]))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()
    assert (tmp_path / "b" / "metrics.json").read_bytes() == (trained / "metrics.json").read_bytes()


def test_loss_log_is_append_only(tmp_path):
    out = tmp_path / "r"
    for _ in range(2):
        assert main(["train", *SMALL, "--steps", "2", "--out", str(out)]) == 0
    assert len((out / "loss.log").read_text().splitlines()) == 4


def test_flag_overrides(tmp_path):
    out = tmp_path / "m"
    assert main(["train", *SMALL, "--steps", "1", "--margin", "0.7", "--lr", "0.002", "--seed", "5", "--out", str(out)]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["loss"]["margin"] == 0.7 and run["config"]["optim"]["lr"] == 0.002 and run["seed"] == 5


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("COSAM_OUTPUT_ROOT", str(tmp_path))
    assert main(["gen-data", *SMALL]) == 0
    (made,) = [p for p in tmp_path.iterdir() if p.name.startswith("gen-data-")]
    assert (made / "manifest").is_file() and (made / "run.json").is_file()


def test_gen_data_then_train_from_disk(tmp_path):
    ds = tmp_path / "ds"
    assert main(["gen-data", *SMALL, "--out", str(ds)]) == 0
    assert main(["train", *SMALL, "--data", str(ds), "--steps", "2", "--out", str(tmp_path / "t")]) == 0
    assert main(["train", *SMALL, "--steps", "2", "--out", str(tmp_path / "u")]) == 0
    # same data whether generated in memory or read back from disk
    a = json.loads((tmp_path / "t" / "metrics.json").read_text())["metrics"]
    b = json.loads((tmp_path / "u" / "metrics.json").read_text())["metrics"]
    assert a == b


def test_untrained_eval_is_near_chance(tmp_path, capsys):
    assert main(["eval", "--set", "data.num_ids=10", "--set", "data.snippets_per_id=4", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())["metrics"]
    assert abs(m["mAP"] - m["mAP_chance"]) < 3 * m["mAP_chance_std"]


def test_profile_reports_reference_rows(capsys, tmp_path):
    assert main(["profile", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "1.58M" in text and "8.39M" in text
    assert "COSAM@4x2048x16x8.params=1576321" in (tmp_path / "profile.txt").read_text()
    assert main(["profile", "--geometry", "4,2048,16,8", "--geometry", "2x512x8x4", "--format", "kv"]) == 0


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--only", "ncc,cross_entropy", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "failed=0" in out


def test_gradcheck_fails_nonzero_on_violation(capsys):
    assert main(["gradcheck", "--only", "sigmoid", "--tol", "1e-20"]) == 2


def test_export_masks(trained, tmp_path):
    out = tmp_path / "masks"
    assert main(["export-masks", "--checkpoint", str(trained / "model.ckpt"), "--snippets", "0,2", "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert "query0000_cosam3_f0.pgm" in names and "query0002_cosam4.ctf" in names
    assert main(["export-masks", "--checkpoint", str(trained / "model.ckpt"), "--snippets", "99", "--out", str(out)]) == 2


def test_export_srim_associations(tmp_path):
    out = tmp_path / "srim"
    args = ["export-masks", *SMALL, "--set", "srim.enable=true", "--set", "srim.heads=4", "--out", str(out)]
    assert main(args) == 0
    assert any(n.startswith("query0000_srim4_f0_o") for n in os.listdir(out))
