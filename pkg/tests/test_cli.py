import csv
import json

import numpy as np
import pytest

from zoneseg.cli import dispatch
from zoneseg.volume import Volume, read_volume, write_volume

TRAIN_FLAGS = ["--width-scale", "1/16", "--epochs", "1", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert dispatch(["synth", "--seed", "1", "--dims", "24x24x6", "--count", "3", "--out", str(d)]) == 0
    return d


def test_synth_outputs(tmp_path):
    assert dispatch(["synth", "--seed", "1", "--dims", "24x24x6", "--labels", "6", "--count", "2", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*.zvol")) == [
        "phantom_000_image.zvol",
        "phantom_000_labels.zvol",
        "phantom_001_image.zvol",
        "phantom_001_labels.zvol",
    ]
    assert read_volume(tmp_path / "phantom_000_labels.zvol").header.label_names[-1] == "femur"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seeds"] == {"seed": 1}


def test_stats(tmp_path, data):
    assert dispatch(["stats", "--data", str(data), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "balance.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and 0 < float(rows[0]["tz_fraction"]) < 1
    assert (tmp_path / "histogram.csv").exists()


def test_resample(tmp_path, data):
    src = str(data / "phantom_000_labels.zvol")
    assert dispatch(["resample", "--input", src, "--spacing", "2x2x3.6", "--out", str(tmp_path)]) == 0
    assert read_volume(tmp_path / "phantom_000_labels.zvol").header.dims == (12, 12, 6)


def test_crossval_predict_evaluate_inspect(tmp_path, data):
    cv = tmp_path / "cv"
    assert dispatch(["crossval", "--data", str(data), "--folds", "3", *TRAIN_FLAGS, "--out", str(cv)]) == 0
    assert len(list(cv.glob("fold*/model.ckpt"))) == 3
    manifest = json.loads((cv / "manifest.json").read_text())
    assert manifest["config"]["folds"] == 3 and manifest["config"]["label_weights"] == [1.0, 2.0, 6.0]
    assert len(manifest["inputs"]) == 6

    pred = tmp_path / "pred"
    model = str(cv / "fold0" / "model.ckpt")
    assert dispatch(["predict", "--model", model, "--data", str(data), "--out", str(pred)]) == 0
    out = read_volume(pred / "phantom_000_pred.zvol")
    assert out.voxels.shape == (6, 24, 24)

    ev = tmp_path / "eval"
    truth = str(data / "phantom_000_labels.zvol")
    assert dispatch(["evaluate", "--pred", str(pred / "phantom_000_pred.zvol"), "--truth", truth, "--out", str(ev)]) == 0
    assert (ev / "summary.csv").exists()

    ins = tmp_path / "inspect"
    args = ["inspect", "--model", model, "--image", str(data / "phantom_000_image.zvol"), "--labels", truth]
    assert dispatch(args + ["--compare-model", str(cv / "fold1" / "model.ckpt"), "--out", str(ins)]) == 0
    assert sorted(p.name for p in ins.glob("conv?b.pgm")) == [f"conv{i}b.pgm" for i in range(1, 8)]
    assert (ins / "conv7b_a.pgm").exists() and (ins / "conv7b_b.pgm").exists()
    assert (ins / "conv7b_correlation.csv").exists()


def test_evaluate_identical_files(tmp_path, data, capsys):
    truth = str(data / "phantom_001_labels.zvol")
    assert dispatch(["evaluate", "--pred", truth, "--truth", truth]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(line.endswith("1.000000") for line in lines)


def test_train_with_test_set(tmp_path, data):
    test_dir = tmp_path / "test"
    assert dispatch(["synth", "--seed", "9", "--dims", "24x24x6", "--prefix", "test", "--out", str(test_dir)]) == 0
    run = tmp_path / "run"
    assert dispatch(["train", "--data", str(data), "--test-data", str(test_dir), *TRAIN_FLAGS, "--out", str(run)]) == 0
    assert (run / "model.ckpt").exists() and (run / "report.csv").exists()
    assert (run / "predictions" / "test_000_pred.zvol").exists()
    clash = tmp_path / "clash"
    assert dispatch(["train", "--data", str(data), "--test-data", str(data), *TRAIN_FLAGS, "--out", str(clash)]) == 1


def test_config_file_and_flag_precedence(tmp_path, data):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 5, "lr": 0.5, "folds": 3, "width_scale": 0.0625}))
    run = tmp_path / "run"
    assert dispatch(["crossval", "--data", str(data), "--config", str(cfg), "--epochs", "1", "--out", str(run)]) == 0
    resolved = json.loads((run / "manifest.json").read_text())["config"]
    assert resolved["epochs"] == 1 and resolved["lr"] == 0.5 and resolved["folds"] == 3


def test_set_override(tmp_path, data):
    run = tmp_path / "run"
    args = ["crossval", "--data", str(data), "--folds", "3", *TRAIN_FLAGS, "--set", "augmentation.flip_prob=0.0"]
    assert dispatch(args + ["--out", str(run)]) == 0
    assert json.loads((run / "manifest.json").read_text())["config"]["augmentation"]["flip_prob"] == 0.0


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        ["synth", "--bogus"],
        ["crossval", "--data", "x"],
        ["crossval", "--data", "x", "--out", "y", "--weights", "a,b"],
        [],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert dispatch(argv) == 1


def test_config_error_exit_1(tmp_path, data):
    assert dispatch(["crossval", "--data", str(data), "--lr", "-1", "--out", str(tmp_path)]) == 1
    assert dispatch(["crossval", "--data", str(data), "--set", "nope=1", "--out", str(tmp_path)]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad_image.zvol"
    bad.write_bytes(b"garbage")
    assert dispatch(["resample", "--input", str(bad), "--spacing", "1x1x1", "--out", str(tmp_path / "o")]) == 2
    assert "offset" in capsys.readouterr().err
    empty = tmp_path / "empty"
    empty.mkdir()
    assert dispatch(["crossval", "--data", str(empty), "--out", str(tmp_path / "o2")]) == 2


def test_evaluate_dim_mismatch(tmp_path):
    a, b = tmp_path / "a.zvol", tmp_path / "b.zvol"
    write_volume(Volume.labels(np.zeros((2, 4, 4), np.uint8), (1, 1, 1)), a)
    write_volume(Volume.labels(np.zeros((2, 4, 8), np.uint8), (1, 1, 1)), b)
    assert dispatch(["evaluate", "--pred", str(a), "--truth", str(b)]) == 1


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ZONESEG_THREADS", "1")
    assert dispatch(["synth", "--dims", "24x24x6", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["threads"] == 1
