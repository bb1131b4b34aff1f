import csv
import json
import subprocess
import sys

import pytest

from fcdrn.cli import run

DATA = "synth:n=8,size=32,classes=3,seed=0,val=4"
MODEL = ["--variant", "P", "--scale", "0.1", "--blocks-per-stage", "1"]


def train_args(out, *extra):
    return ["train", *MODEL, "--data", DATA, "--epochs", "2", "--batch-size", "4", "--out", str(out), *extra]


def log_rows(path, drop=("seconds",)):
    return [{k: v for k, v in r.items() if k not in drop} for r in csv.DictReader(open(path))]


@pytest.fixture(scope="module")
def run1(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run1"
    assert run(train_args(out)) == 0
    return out


def test_train_outputs(run1):
    assert (run1 / "best" / "manifest.json").is_file()
    assert (run1 / "last" / "manifest.json").is_file()
    rows = log_rows(run1 / "train_log.csv", drop=())
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert list(rows[0]) == ["epoch", "lr", "train_loss", "val_miou", "val_acc", "seconds"]
    stanza = json.loads((run1 / "run.json").read_text())
    assert {"seed", "config_hash", "version"} <= set(stanza)
    assert stanza["version"].startswith("v")


def test_identical_runs_identical_csv(run1, tmp_path):
    assert run(train_args(tmp_path / "again")) == 0
    assert log_rows(tmp_path / "again" / "train_log.csv") == log_rows(run1 / "train_log.csv")
    a = json.loads((run1 / "run.json").read_text())
    b = json.loads((tmp_path / "again" / "run.json").read_text())
    assert a["config_hash"] == b["config_hash"]


def test_resume_matches_uninterrupted(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(train_args(full, "--epochs", "3")) == 0
    assert run(train_args(part)) == 0
    assert run(train_args(part, "--epochs", "3", "--resume", str(part / "last"))) == 0
    assert log_rows(part / "train_log.csv") == log_rows(full / "train_log.csv")


def test_surgery_then_eval(run1, tmp_path):
    assert run(["surgery", "--from", str(run1 / "best"), "--rates", "4,8", "--out", str(tmp_path / "pd")]) == 0
    man = json.loads((tmp_path / "pd" / "manifest.json").read_text())
    assert man["variant"] == "P-D"
    assert run(["eval", "--from", str(tmp_path / "pd"), "--data", DATA, "--out", str(tmp_path / "ev")]) == 0
    lines = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "class,iou" and lines[-2].startswith("mean_iou")


def test_norms(run1, tmp_path):
    assert run(["norms", "--from", str(run1), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "norms.csv")))
    assert len(rows) == 9 * 1 * 2
    assert (tmp_path / "norms.svg").is_file()


def test_ablate(run1, tmp_path):
    assert run(["ablate", "--from", str(run1), "--data", DATA, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert len(rows) == 10 and float(rows[0]["delta"]) == 0.0
    assert (tmp_path / "ablation.svg").is_file()


def test_compress_and_retrain(run1, tmp_path):
    assert run(["compress", "--from", str(run1), "--threshold", "0", "--stage-threshold", "R3=1e9",
                "--data", DATA, "--out", str(tmp_path / "c")]) == 0
    row = next(csv.DictReader(open(tmp_path / "c" / "compression.csv")))
    assert row["removed"] == ""  # one block per stage: nothing removable
    assert float(row["rate"]) == 1.0
    assert run(["retrain-reduced", "--from", str(run1), "--threshold", "0", "--data", DATA, "--epochs", "1",
                "--batch-size", "4", "--out", str(tmp_path / "r")]) == 0
    arms = [r["arm"] for r in csv.DictReader(open(tmp_path / "r" / "comparison.csv"))]
    assert arms == ["compressed", "retrained", "retrained_no_wd"]


def test_count_params_and_rf(tmp_path, capsys):
    assert run(["count-params", "--variant", "D", "--scale", "0.25", "--blocks-per-stage", "1"]) == 0
    assert "parameters" in capsys.readouterr().out
    assert run(["count-params", "--variant", "P-D", "--scale", "0.25", "--list", "--out", str(tmp_path)]) == 0
    assert "dilated_conv" in (tmp_path / "params.txt").read_text()
    assert run(["rf", "--variant", "S", "--scale", "0.25", "--blocks-per-stage", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "receptive_field.csv").read_text().startswith("node,receptive_field,downsample")


def test_synth_then_camvid_training(tmp_path):
    assert run(["synth", "--data", DATA, "--out", str(tmp_path / "ds")]) == 0
    assert (tmp_path / "ds" / "colormap.json").is_file()
    args = ["train", *MODEL, "--data", f"camvid:{tmp_path / 'ds'}", "--epochs", "1", "--batch-size", "4",
            "--crop", "32", "--out", str(tmp_path / "run")]
    assert run(args) == 0


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"variant = S\nscale = 0.1\nblocks_per_stage = 1\ndata = {DATA}\nmax_epochs = 1\nbatch_size = 4\n")
    assert run(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "best" / "manifest.json").read_text())
    assert man["variant"] == "S"


@pytest.mark.parametrize("argv", [
    [],
    ["train", "--variant", "X"],
    ["train", *MODEL, "--out", "x"],
    ["train", *MODEL, "--data", "imagenet:/x", "--out", "x"],
    ["train", "--variant", "P-D", "--scale", "0.1", "--data", DATA, "--out", "x"],
    ["train", *MODEL, "--data", "synth:n=4,colour=red", "--out", "x"],
    ["train", *MODEL, "--data", DATA, "--patience", "0", "--out", "x"],
    ["surgery", "--from", "x", "--rates", "3,8", "--out", "y"],
    ["compress", "--from", "x", "--threshold", "-1", "--out", "y"],
    ["count-params", "--scale", "-2"],
    ["eval", "--from", "x"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1


def test_data_errors_exit_2(tmp_path):
    assert run(["norms", "--from", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert run(["train", *MODEL, "--data", f"camvid:{tmp_path / 'nope'}", "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "empty" / "train" / "images").mkdir(parents=True)
    assert run(["eval", "--from", str(tmp_path), "--data", f"camvid:{tmp_path / 'empty'}"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path):
    assert run(train_args(tmp_path / "d", "--lr", "1e30")) == 3
    assert json.loads((tmp_path / "d" / "summary.json").read_text())["status"] == "diverged"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fcdrn", "count-params", "--scale", "0.1",
                          "--blocks-per-stage", "1"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "FC-DRN-P" in res.stdout
