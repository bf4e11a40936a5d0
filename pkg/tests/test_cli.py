import json
import subprocess
import sys

import pytest
import yaml

from vismotor import cli
from vismotor import evaluate as E

TINY_MODEL = {"backbone_widths": [8, 16, 16], "stem_width": 8, "fpn_channels": 16, "head_convs": 1,
              "encoder_width": 16, "encoder_heads": 2, "encoder_layers": 1, "semantic_node_units": 8}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    if code == 0:
        return code, json.loads(out.strip().splitlines()[-1])
    return code, json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset plus a config file pointing at it."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "dataset": {"layouts": 4, "backgrounds": 3, "noise": 0, "max_blocks": 4},
        "model": TINY_MODEL,
        "train": {"multitask": {"iterations": 3, "lr": 1e-3, "log_every": 1},
                  "detection": {"iterations": 3, "warmup": 0}},
        "paths": {"root": str(root), "dataset": "data"},
        "eval": {"score_thresh": 0.0},
    }
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["gen-dataset", "--config", str(path), "--out", str(root / "data")]) == 0
    return root, path


def test_gen_dataset_count(tmp_path, capsys):
    code, res = run(capsys, "gen-dataset", "--layouts", 20, "--backgrounds", 5, "--noise", 3, "--max-blocks", 3,
                    "--seed", 2, "--out", tmp_path / "ds")
    assert code == 0 and res["status"] == "ok"
    assert res["expected"] == 400 and res["samples"] + res["skipped"] == 400
    assert len(list((tmp_path / "ds" / "images").glob("*.png"))) == res["samples"]
    assert (tmp_path / "ds" / "config.yaml").exists()


def test_config_echo_replays(tmp_path, capsys):
    code, first = run(capsys, "gen-dataset", "--layouts", 2, "--backgrounds", 2, "--noise", 1,
                      "--out", tmp_path / "a")
    echoed = yaml.safe_load((tmp_path / "a" / "config.yaml").read_text())
    echoed["paths"]["out"] = str(tmp_path / "b")
    (tmp_path / "echo.yaml").write_text(yaml.safe_dump(echoed))
    code, second = run(capsys, "gen-dataset", "--config", tmp_path / "echo.yaml", "--out", tmp_path / "b")
    assert code == 0 and second["records_hash"] == first["records_hash"]


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("train:\n  multitask:\n    iterations: 5\n  learnin_rate: 3\n")
    code, err = run(capsys, "train", "--config", tmp_path / "bad.yaml", "--out", tmp_path / "o")
    assert code == 2 and err["type"] == "config" and "train.learnin_rate" in err["message"]


def test_missing_required_key(tmp_path, capsys):
    code, err = run(capsys, "eval-grasp", "--out", tmp_path / "o", "--dataset", tmp_path)
    assert code == 2 and "paths.checkpoint" in err["message"]


def test_mutually_exclusive_modes(tmp_path, capsys):
    code, err = run(capsys, "train", "--detection", "--multitask", "--out", tmp_path)
    assert code == 2 and err["type"] == "usage"
    code, err = run(capsys, "train")
    assert code == 2


def test_missing_dataset_is_error(tmp_path, capsys):
    code, err = run(capsys, "train", "--dataset", tmp_path / "nowhere", "--out", tmp_path / "o")
    assert code == 1 and err["status"] == "error"


def test_train_is_reproducible(workspace, capsys):
    root, cfg = workspace
    _, a = run(capsys, "train", "--config", cfg, "--out", root / "t1")
    _, b = run(capsys, "train", "--config", cfg, "--out", root / "t2")
    assert a["final_val"] == b["final_val"] and a["iterations"] == 3
    assert (root / "t1" / "report.jsonl").read_text() == (root / "t2" / "report.jsonl").read_text()
    _, c = run(capsys, "train", "--config", cfg, "--seed", 5, "--out", root / "t3")
    assert c["final_val"] != a["final_val"]


def test_train_detection_and_evals(workspace, capsys):
    root, cfg = workspace
    code, res = run(capsys, "train", "--config", cfg, "--detection", "--out", root / "det")
    assert code == 0 and res["mode"] == "detection" and set(res["final_val"]) == {"sl1", "fl"}
    ck = root / "det" / "model.ckpt"
    code, res = run(capsys, "train", "--config", cfg, "--init", ck, "--iterations", 2, "--out", root / "ft")
    assert code == 0 and res["iterations"] == 2
    code, res = run(capsys, "eval-detect", "--config", cfg, "--checkpoint", ck, "--out", root / "ed")
    assert code == 0 and len(E.read_csv(root / "ed" / "class_ap.csv")) == 16
    code, res = run(capsys, "eval-grasp", "--config", cfg, "--checkpoint", root / "ft" / "model.ckpt",
                    "--split", "all", "--out", root / "eg")
    assert code == 0 and res["mse"] >= 0 and res["samples"] > 0
    code, res = run(capsys, "analyze-bias", "--config", cfg, "--checkpoint", ck, "--out", root / "ab")
    assert code == 0
    assert len(E.read_csv(root / "ab" / "cell_map.csv")) == 64
    assert (root / "ab" / "bias.json").exists()


def test_ablate_and_report(workspace, capsys):
    root, cfg = workspace
    code, res = run(capsys, "ablate", "--config", cfg, "--trials", 3, "--iterations", 2, "--out", root / "abl")
    assert code == 0 and res["runs"] == 12
    run_dirs = [p for p in (root / "abl").iterdir() if p.is_dir()]
    assert len(run_dirs) == 12
    assert len(list((root / "abl").glob("*.csv"))) == 1
    rows = E.read_csv(root / "abl" / "ablation.csv")
    assert [r["combination"] for r in rows] == ["classification", "none", "both", "localization"]
    code, res = run(capsys, "report", "--runs", root / "abl", "--out", root / "rep")
    assert code == 0 and res["ablation_rows"] == 4 and res["curves"] > 0
    assert (root / "rep" / "loss_curves.png").exists()
    code, err = run(capsys, "report", "--runs", root / "empty_nothing", "--out", root / "rep2")
    assert code == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vismotor.cli", "gen-dataset"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["status"] == "error"
