import json
import os

import pytest

from src.config import DEFAULT_OUTPUT_DIR, ExperimentConfig, Stage2Config, load_config, merge, parse_override
from src.errors import ConfigurationError


def test_parse_override_values():
    assert parse_override("stage2.use_sgtm=false") == (("stage2", "use_sgtm"), False)
    assert parse_override("stage1.tau=0.1") == (("stage1", "tau"), 0.1)
    assert parse_override("model.graph_path=data/g.json") == (("model", "graph_path"), "data/g.json")
    assert parse_override("eval.ranks=[1, 3]") == (("eval", "ranks"), [1, 3])
    with pytest.raises(ConfigurationError):
        parse_override("stage1.tau")
    with pytest.raises(ConfigurationError):
        parse_override("=3")


def test_merge_copies_and_rejects_unknown_keys():
    base = Stage2Config()
    merged = merge(base, {"lambda1": 2, "use_atd": False})
    assert merged.lambda1 == 2.0 and isinstance(merged.lambda1, float)
    assert base.use_atd and not merged.use_atd
    with pytest.raises(ConfigurationError) as err:
        merge(ExperimentConfig(), {"stage2": {"lamda1": 1.0}})
    assert "stage2.lamda1" in str(err.value)
    with pytest.raises(ConfigurationError):
        merge(base, {"use_atd": "no"})


def test_nested_schedule_and_tuple_coercion(workdir):
    cfg = load_config(overrides=["stage1.schedule.milestones=[15, 30]", "eval.ranks=[1, 3]"])
    assert cfg.stage1.schedule.milestones == (15, 30)
    assert cfg.eval.ranks == (1, 3)


def test_load_config_layers_file_overrides_and_seed(workdir):
    path = workdir / "cfg.json"
    path.write_text(json.dumps({"stage1": {"epochs": 3, "tau": 0.2}, "data": {"num_identities": 6}}))
    cfg = load_config(str(path), overrides=["stage1.epochs=5"], seed=9)
    assert cfg.stage1.epochs == 5
    assert cfg.stage1.tau == 0.2
    assert cfg.data.num_identities == 6
    assert (cfg.seed, cfg.data.seed, cfg.stage1.seed, cfg.stage2.seed) == (9, 9, 9, 9)
    assert cfg.output_dir == DEFAULT_OUTPUT_DIR


def test_desk_config_loads(workdir):
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    cfg = load_config(os.path.join(root, "configs", "desk.json"))
    assert cfg.data.frames == 4 and cfg.stage1.frames == 4
    assert cfg.stage1.schedule.lr_peak == pytest.approx(1e-3)


def test_missing_and_malformed_files(workdir):
    with pytest.raises(ConfigurationError):
        load_config(str(workdir / "absent.json"))
    bad = workdir / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigurationError):
        load_config(str(bad))


def test_skeleton_mode_requires_sgtm_off(workdir):
    with pytest.raises(ConfigurationError):
        load_config(overrides=["stage2.mode=skeleton"])
    cfg = load_config(overrides=["stage2.mode=skeleton", "stage2.use_sgtm=false"])
    assert cfg.stage2.mode == "skeleton"


@pytest.mark.parametrize("override", [
    "stage1.mode=audio",
    "stage2.p=1",
    "sgt.dim=32",
    "model.patch_height=7",
    "stage1.schedule.milestones=[5, 3]",
    "stage2.lambda2=-1",
])
def test_invalid_values_rejected(workdir, override):
    with pytest.raises(ConfigurationError):
        load_config(overrides=[override])


def test_output_dir_from_environment(workdir, monkeypatch):
    monkeypatch.setenv("REID_OUTPUT_DIR", str(workdir / "elsewhere"))
    assert load_config().output_dir == str(workdir / "elsewhere")
