import json
import os

import numpy as np
import pytest

from src.cli import run
from src.errors import EXIT_OK, EXIT_VALIDATION
from src.evaluation import FeatureSet, load_features, save_features
from src.ingest import JointRegressor, load_skeleton_json, write_obj


@pytest.fixture
def config_file(workdir, tiny_sections):
    path = workdir / "tiny.json"
    path.write_text(json.dumps(tiny_sections))
    return str(path)


def test_gen_data_is_reproducible(workdir, config_file):
    assert run(["gen-data", "--config", config_file, "--seed", "3", "--out", "a"]) == EXIT_OK
    assert run(["gen-data", "--config", config_file, "--seed", "3", "--out", "b"]) == EXIT_OK
    assert (workdir / "a" / "manifest.json").read_text() == (workdir / "b" / "manifest.json").read_text()
    assert (workdir / "a" / "0000" / "0000_00" / "images.bin").read_bytes() == \
        (workdir / "b" / "0000" / "0000_00" / "images.bin").read_bytes()


def test_gen_data_refuses_to_overwrite(workdir, config_file):
    assert run(["gen-data", "--config", config_file, "--out", "data"]) == EXIT_OK
    assert run(["gen-data", "--config", config_file, "--out", "data"]) == EXIT_VALIDATION
    assert run(["gen-data", "--config", config_file, "--out", "data", "--force"]) == EXIT_OK


def test_eval_on_perfect_features(workdir, capsys):
    save_features("q.feat", FeatureSet(np.eye(3), [0, 1, 2], [0, 0, 0]))
    save_features("g.feat", FeatureSet(np.eye(3), [0, 1, 2], [1, 1, 1]))
    code = run(["eval", "--query-features", "q.feat", "--gallery-features", "g.feat", "--out", "metrics.json"])
    assert code == EXIT_OK
    report = json.loads((workdir / "metrics.json").read_text())
    assert report["mAP"] == 1.0 and report["cmc"]["1"] == 1.0
    assert report["protocol"] == "features"
    assert "Rank-1" in capsys.readouterr().out


def test_eval_needs_inputs(workdir):
    assert run(["eval"]) == EXIT_VALIDATION
    assert run(["eval", "--query-features", "q.feat"]) == EXIT_VALIDATION


def test_argument_errors_exit_with_validation_code(workdir):
    assert run(["pretrain", "--data", "x", "--no-such-flag"]) == EXIT_VALIDATION
    assert run([]) == EXIT_VALIDATION
    assert run(["gen-data", "--out", "d", "--set", "stage1.tau"]) == EXIT_VALIDATION
    assert run(["--help"]) == EXIT_OK


def test_gradcheck_subset(workdir):
    assert run(["gradcheck", "--only", "softmax", "loss.ce", "--seeds", "2"]) == EXIT_OK
    assert run(["gradcheck", "--only", "not-a-check"]) == EXIT_VALIDATION


def test_regress_joints_writes_keypoint_frames(workdir):
    JointRegressor(np.eye(3)[[0, 2]]).save("reg.bin")
    write_obj("m0.obj", np.arange(9, dtype=np.float64).reshape(3, 3))
    write_obj("m1.obj", np.arange(9, 18, dtype=np.float64).reshape(3, 3))
    args = ["regress-joints", "--regressor", "reg.bin", "--out", "kp", "--pid", "4", "m0.obj", "m1.obj"]
    assert run(args) == EXIT_OK
    seq = load_skeleton_json("kp", joint_names=["joint_0", "joint_1"])
    assert seq.pid == 4 and seq.length == 2
    assert np.array_equal(seq.joints[1], [[9.0, 10.0, 11.0], [15.0, 16.0, 17.0]])
    assert run(args) == EXIT_VALIDATION
    assert run(args + ["--force"]) == EXIT_OK


def test_missing_dataset_is_a_validation_error(workdir, config_file):
    assert run(["pretrain", "--config", config_file, "--data", "absent"]) == EXIT_VALIDATION


def test_pretrain_finetune_eval_export(workdir, config_file):
    common = ["--config", config_file, "--output-dir", "runs"]
    assert run(["gen-data", "--out", "data"] + common) == EXIT_OK
    assert run(["pretrain", "--data", "data"] + common) == EXIT_OK
    for name in ("stage1.ckpt", "stage1.jsonl", "stage1.metrics.json"):
        assert os.path.exists(workdir / "runs" / name)
    assert json.loads((workdir / "runs" / "stage1.metrics.json").read_text())["protocol"] == "skeleton-to-visual"
    assert run(["pretrain", "--data", "data"] + common) == EXIT_VALIDATION

    assert run(["finetune", "--data", "data", "--checkpoint", "runs/stage1.ckpt"] + common) == EXIT_OK
    records = [json.loads(line) for line in (workdir / "runs" / "stage2.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in records] == ["stage2"]

    assert run(["eval", "--data", "data", "--checkpoint", "runs/stage2.ckpt"] + common) == EXIT_OK
    report = json.loads((workdir / "runs" / "metrics.json").read_text())
    assert report["protocol"] == "visual" and 0.0 <= report["mAP"] <= 1.0

    assert run(["export-features", "--data", "data", "--checkpoint", "runs/stage2.ckpt",
                "--split", "gallery"] + common) == EXIT_OK
    features = load_features(str(workdir / "runs" / "gallery.visual.feat"))
    assert features.features.shape == (4, 16)
