import json
import os

import pytest

from lsptm import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from models.report_info import ConfusionMatrix2, EvalReport, FoldResult
from services.checkpoint import load_run_config
from services.dataset import load_manifest, write_manifest
from services.metrics import compute_metrics, emit_report

TINY_C3D = {"conv_channels": [2], "pool_schedule": [[1, 2, 2]], "fc_widths": [], "num_frames": 4,
            "input_size": [16, 16]}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "c3d.json"
    path.write_text(json.dumps({"backbone": "c3d", "model": TINY_C3D, "epochs": 1, "batch_size": 4, "lr": 0.01}))
    return str(path)


def write_report(path, backbone, name, counts):
    cm = ConfusionMatrix2(*counts)
    fold = FoldResult(fold=0, confusion=cm, metrics=compute_metrics(cm), test_indices=[0])
    report = EvalReport(backbone=backbone, display_name=name, config_digest="f" * 64, folds=[fold], pooled=cm,
                        metrics=compute_metrics(cm), k=1)
    with open(path, "wb") as f:
        f.write(emit_report(report, "json"))
    return str(path)


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == EXIT_OK
    assert main([]) == EXIT_USAGE
    assert main(["fly"]) == EXIT_USAGE
    assert main(["crossval", "--manifest", "m.jsonl", "--out", "r.json", "--backbone", "resnet"]) == EXIT_USAGE


def test_generate(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_per_class": {"normal": 2, "benign": 1, "malignant": 2}, "frames": 8,
                                "resolution": [16, 16]}))
    out = tmp_path / "data"
    assert main(["generate", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    manifest = capsys.readouterr().out.strip().splitlines()[-1]
    assert manifest == str(out / "manifest.jsonl")
    assert len(os.listdir(out / "clips")) == 5


def test_bad_spec_is_a_usage_error(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_per_class": {"normal": 0, "benign": 0, "malignant": 0}}))
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_spec_value_of_the_wrong_type_is_a_usage_error(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_per_class": {"normal": 2, "benign": 1, "malignant": 2}, "frames": "8"}))
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


def test_config_value_of_the_wrong_type_is_a_usage_error(small_dataset, tmp_path):
    config = tmp_path / "c3d.json"
    config.write_text(json.dumps({"backbone": "c3d", "model": TINY_C3D, "epochs": "1"}))
    out = tmp_path / "m.ckpt"
    assert main(["train", "--manifest", small_dataset, "--config", str(config), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_crossval_with_k_of_one_is_rejected(small_dataset, tmp_path, config_file):
    out = tmp_path / "r.json"
    assert main(["crossval", "--manifest", small_dataset, "--config", config_file, "--k", "1",
                 "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


@pytest.mark.parametrize("k", ["1", "3"])
def test_k_that_disagrees_with_manifest_folds_is_rejected(small_dataset, tmp_path, config_file, k):
    entries = load_manifest(small_dataset)
    for i, e in enumerate(entries):
        e.fold = i % 2
    manifest = write_manifest(entries, str(tmp_path / "folds.jsonl"))
    out = tmp_path / "r.json"
    assert main(["crossval", "--manifest", manifest, "--config", config_file, "--k", k,
                 "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_missing_manifest_is_a_usage_error(tmp_path, config_file):
    assert main(["train", "--manifest", str(tmp_path / "none.jsonl"), "--config", config_file,
                 "--out", str(tmp_path / "m.ckpt")]) == EXIT_USAGE


def test_train_then_eval(small_dataset, tmp_path, config_file, capsys):
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--manifest", small_dataset, "--config", config_file, "--seed", "2",
                 "--out", str(ckpt)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("[1/1] epoch 1: loss ")
    assert lines[-1] == str(ckpt)

    report_path = tmp_path / "eval.json"
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", small_dataset, "--backbone", "c3d",
                 "--out", str(report_path)]) == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["backbone"] == "c3d"
    assert sum(report["pooled"].values()) == 12
    assert report["per_class"]["normal"]["count"] == 5

    assert main(["eval", "--ckpt", str(ckpt), "--manifest", small_dataset, "--backbone", "timesformer",
                 "--out", str(tmp_path / "other.json")]) == EXIT_USAGE


def test_eval_uses_the_trained_sampling_and_positive_class(small_dataset, tmp_path):
    config = tmp_path / "c3d_pos0.json"
    config.write_text(json.dumps({"backbone": "c3d", "model": TINY_C3D, "epochs": 1, "batch_size": 4, "lr": 0.01,
                                  "sampling": {"stride": 5}, "positive_class": 0}))
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--manifest", small_dataset, "--config", str(config), "--out", str(ckpt)]) == EXIT_OK
    assert load_run_config(str(ckpt)).sampling == {"count": 4, "stride": 5}

    report_path = tmp_path / "eval.json"
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", small_dataset, "--out", str(report_path)]) == EXIT_OK
    assert json.loads(report_path.read_text())["positive_class"] == 0
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", small_dataset, "--positive-class", "1",
                 "--out", str(report_path)]) == EXIT_OK
    assert json.loads(report_path.read_text())["positive_class"] == 1


def test_crossval_writes_report(small_dataset, tmp_path, config_file, capsys):
    out = tmp_path / "cv.json"
    assert main(["crossval", "--manifest", small_dataset, "--config", config_file, "--k", "2",
                 "--seed", "0", "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("[1/2] fold 0: tp=")
    assert lines[-1] == str(out)
    assert json.loads(out.read_text())["k"] == 2


def test_report_table_and_compare(tmp_path, capsys):
    paths = [write_report(tmp_path / "a.json", "c3d", "C3D", (8, 1, 2, 9)),
             write_report(tmp_path / "b.json", "timesformer", "TimeSformer", (8, 1, 1, 10)),
             write_report(tmp_path / "c.json", "videoswin", "Video-Swin-Transformer", (9, 0, 1, 10))]
    assert main(["report", "--in", *paths, "--format", "table", "--compare", "c3d"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["Method", "Acc", "Sen", "Pre", "F1"]
    assert [line.split()[0] for line in lines[1:4]] == ["C3D", "TimeSformer", "Video-Swin-Transformer"]
    assert lines[4].startswith("TimeSformer vs c3d: acc=+5.0")


def test_report_json_reemits_input(tmp_path, capsys):
    path = write_report(tmp_path / "a.json", "c3d", "C3D", (8, 1, 2, 9))
    assert main(["report", "--in", path, "--format", "json"]) == EXIT_OK
    assert capsys.readouterr().out == open(path).read()


def test_unreadable_input_is_a_runtime_failure(tmp_path):
    assert main(["report", "--in", str(tmp_path)]) == EXIT_FAILURE
