import numpy as np
import pytest

from src.checkpoint import MAGIC, decode_container, encode_container, load_container, save_container
from src.errors import IngestError
from src.model import PROTOTYPE_KEYS, ReIDModel, load_checkpoint, save_checkpoint
from src.rng import stream
from src.synthetic import generate_dataset
from src.trainer import pool_prototypes


def test_container_roundtrip_is_byte_stable(tmp_path):
    arrays = {"b.scalar": np.array(2.5), "a.matrix": np.arange(6.0).reshape(2, 3), "c.empty": np.zeros((0, 4))}
    blob = encode_container(arrays)
    assert blob.startswith(MAGIC)
    assert encode_container(dict(reversed(list(arrays.items())))) == blob
    decoded = decode_container(blob)
    assert sorted(decoded) == ["a.matrix", "b.scalar", "c.empty"]
    for name, value in arrays.items():
        assert decoded[name].shape == value.shape
        assert np.array_equal(decoded[name], value)
    path = tmp_path / "nested" / "x.ckpt"
    save_container(str(path), arrays)
    assert path.read_bytes() == blob
    assert np.array_equal(load_container(str(path))["a.matrix"], arrays["a.matrix"])


def test_container_rejects_bad_magic_and_truncation():
    blob = encode_container({"w": np.ones(3)})
    with pytest.raises(IngestError):
        decode_container(b"NOTCKPT!" + blob[8:])
    with pytest.raises(IngestError) as err:
        decode_container(blob[:-5], source="model.ckpt")
    assert "model.ckpt" in str(err.value)
    with pytest.raises(IngestError):
        load_container("/nonexistent/model.ckpt")


def test_checkpoint_roundtrip_with_prototypes(tmp_path, tiny_config):
    cfg = tiny_config()
    splits = generate_dataset(cfg.data)
    model = ReIDModel(cfg, splits.num_classes)
    pool_prototypes(model, splits, cfg.stage2.frames)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(model, path)
    assert set(PROTOTYPE_KEYS) <= set(load_container(path))

    fresh = ReIDModel(cfg.with_seed(1), splits.num_classes)
    load_checkpoint(fresh, path)
    for (name, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    assert np.array_equal(fresh.pfu.prototypes.visual, model.pfu.prototypes.visual)
    assert fresh.pfu.prototypes.identity_map == splits.label_map


def test_checkpoint_must_match_architecture(tmp_path, tiny_config):
    cfg = tiny_config()
    splits = generate_dataset(cfg.data)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(ReIDModel(cfg, splits.num_classes), path)
    with pytest.raises(IngestError):
        load_checkpoint(ReIDModel(cfg, splits.num_classes + 1), path)


def test_every_module_is_built_from_its_own_stream(tiny_config):
    cfg = tiny_config()
    a = ReIDModel(cfg, 4)
    b = ReIDModel(cfg, 4)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    names = {path.split(".", 1)[0] for path, _ in a.named_parameters()}
    assert names == {"visual", "skeleton", "heads", "pfu", "sgtm", "classifier"}


def test_named_streams_are_independent():
    assert stream(0, "stpr", 3).random() == stream(0, "stpr", 3).random()
    assert stream(0, "stpr", 3).random() != stream(0, "stpr", 4).random()
    assert stream(0, "stpr").random() != stream(0, "pk").random()
    assert stream(0, "stpr").random() != stream(1, "stpr").random()
