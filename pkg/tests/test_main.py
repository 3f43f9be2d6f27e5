from __future__ import annotations

import json

import pytest
from conftest import TINY_OVERRIDES

from desk_sim.main import main, run
from desk_sim.main.gradcheck import COMPOSITE_PARAMETERS

SHIFTED_CROPS = ["--set", "crop_a=0,0,100,100", "--set", "crop_b=50,50,100,100", "--set", "grid=14"]


def _sets(values):
    return [arg for value in values for arg in ("--set", value)]


def test_inspect_geometry_csv(capsys):
    assert run(["inspect-geometry", *SHIFTED_CROPS]) == 0

    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "u,v,pos_h,pos_w"
    assert lines[1] == "1,1,7,7"
    assert lines[-1] == "14,14,20,20"
    assert len(lines) == 197


def test_inspect_geometry_to_file(tmp_path, capsys):
    out = tmp_path / "positions.csv"
    assert run(["inspect-geometry", *SHIFTED_CROPS, "--out", str(out)]) == 0

    assert capsys.readouterr().out == ""
    assert out.read_text().splitlines()[1] == "1,1,7,7"


def test_grad_check_passes(capsys):
    assert run(["grad-check"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_grad_check_covers_both_loss_branches(tmp_path):
    out = tmp_path / "grad.json"
    overrides = _sets(["loss.alpha_global=1", "loss.alpha_dense=4"])

    assert run(["grad-check", "--out", str(out)] + overrides) == 0

    record = json.loads(out.read_text())
    assert record["passed"]
    assert record["parameter"] in COMPOSITE_PARAMETERS


@pytest.mark.parametrize(
    "argv", [["pretrain", "--no-such-flag"], ["train-everything"], []]
)
def test_usage_errors(argv):
    assert run(argv) == 2


def test_invalid_value_reported_as_json(capsys):
    assert run(["inspect-geometry", "--set", "train.batch_size=1"]) == 2

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigError"
    assert "train.batch_size" in record["message"]


def test_unknown_key_rejected(capsys):
    assert run(["inspect-geometry", "--set", "train.learning_speed=3"]) == 2
    assert "train.learning_speed" in capsys.readouterr().err


def test_missing_dataset_is_a_failure(tmp_path, capsys):
    argv = ["eval-knn", "--set", f"data.train_dir={tmp_path / 'nowhere'}"]
    assert run(argv + _sets(TINY_OVERRIDES)) == 1
    assert "DatasetError" in capsys.readouterr().err


def test_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    run_dir = tmp_path / "run"

    data_sets = _sets(
        [
            "data.synthetic_train=8",
            "data.synthetic_test=4",
            "data.synthetic_size=16",
            "data.synthetic_classes=2",
            f"data.train_dir={data / 'train'}",
            f"data.test_dir={data / 'test'}",
        ]
    )
    model_sets = _sets(TINY_OVERRIDES) + data_sets

    assert run(["gen-synthetic", "--out", str(data), *data_sets]) == 0
    generated = json.loads(capsys.readouterr().out)
    assert generated == {"train": str(data / "train"), "test": str(data / "test")}

    train_sets = _sets(["train.batch_size=4", "train.total_epochs=1", "train.warmup_epochs=0"])
    assert run(["pretrain", "--out", str(run_dir), *model_sets, *train_sets]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 2
    assert summary["checkpoint"] == str(run_dir / "final.ckpt")

    checkpoint = ["--checkpoint", summary["checkpoint"]]

    knn_out = tmp_path / "knn.json"
    assert run(["eval-knn", *checkpoint, "--out", str(knn_out), *model_sets]) == 0
    knn = json.loads(knn_out.read_text())
    assert knn["metric"] == "knn"
    assert 0.0 <= knn["value"] <= 1.0

    linear_out = tmp_path / "linear.json"
    argv = ["eval-linear", *checkpoint, "--out", str(linear_out), "--set", "eval.probe_epochs=5"]
    assert run(argv + model_sets) == 0
    linear = json.loads(linear_out.read_text())
    assert linear["metric"] == "linear" and linear["epochs"] == 5


def test_main_exits_with_status(tmp_path):
    with pytest.raises(SystemExit) as ex:
        main(["inspect-geometry", "--out", str(tmp_path / "grid.csv")])
    assert ex.value.code == 0


def test_log_level_out_of_range_is_fatal(monkeypatch):
    monkeypatch.setenv("SIM_LOG_LEVEL", "99")
    with pytest.raises(SystemExit) as ex:
        run(["inspect-geometry"])
    assert ex.value.code == 9


def test_malformed_crop_is_a_config_error(capsys):
    assert run(["inspect-geometry", "--set", "crop_b=50,50,0,100"]) == 2

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigError"
    assert "geometry.crop_b" in record["message"]


def test_unwritable_run_directory_is_reported(tmp_path, capsys):
    data = tmp_path / "data"
    data_sets = _sets(
        [
            "data.synthetic_train=8",
            "data.synthetic_test=4",
            "data.synthetic_size=16",
            f"data.train_dir={data / 'train'}",
        ]
    )
    assert run(["gen-synthetic", "--out", str(data), *data_sets]) == 0

    blocker = tmp_path / "taken"
    blocker.write_text("")
    argv = ["pretrain", "--out", str(blocker), "--set", "train.batch_size=4"]
    assert run(argv + _sets(TINY_OVERRIDES) + data_sets) == 1

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "CheckpointError"
    assert "taken" in record["message"]
