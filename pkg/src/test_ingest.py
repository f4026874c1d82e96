import json
import logging

import numpy as np
import pytest

from src.errors import DataError, IngestError, ShapeError
from src.ingest import (FRAME_FILE, JointRegressor, default_joint_names, discard_empty_frames, load_skeleton_json,
                        parse_obj, regress_joints, regress_mesh_sequence, write_obj, write_skeleton_json)
from src.tracklet import ImageSequence, SkeletonSequence, Tracklet


def _sequence(length=3, seed=0, valid=None):
    joints = np.random.default_rng(seed).normal(size=(length, 17, 3))
    return SkeletonSequence(joints, pid=7, camid=1, valid=valid)


def _frame_doc(keypoints):
    return json.dumps({"frame": 0, "pid": 7, "camid": 1, "keypoints": keypoints})


def test_skeleton_json_roundtrip(tmp_path):
    seq = _sequence(valid=np.array([True, False, True]))
    written = write_skeleton_json(str(tmp_path), seq)
    assert len(written) == 2
    loaded = load_skeleton_json(str(tmp_path), num_frames=3)
    assert (loaded.pid, loaded.camid) == (7, 1)
    assert loaded.valid.tolist() == [True, False, True]
    assert np.array_equal(loaded.joints, seq.joints)


def test_keypoints_accepted_as_ordered_list(tmp_path):
    rows = np.arange(51, dtype=np.float64).reshape(17, 3)
    path = tmp_path / FRAME_FILE.format(0)
    path.write_text(_frame_doc(rows.tolist()))
    loaded = load_skeleton_json(str(path))
    assert np.array_equal(loaded.joints[0], rows)


def test_short_file_marks_frame_invalid(tmp_path):
    write_skeleton_json(str(tmp_path), _sequence(length=2))
    (tmp_path / FRAME_FILE.format(1)).write_text("  \n")
    loaded = load_skeleton_json(str(tmp_path))
    assert loaded.valid.tolist() == [True, False]
    assert not np.any(loaded.joints[1])


def test_malformed_json_reports_offset(tmp_path):
    path = tmp_path / FRAME_FILE.format(0)
    path.write_text('{"keypoints": [1, 2,')
    with pytest.raises(IngestError) as err:
        load_skeleton_json(str(path))
    assert str(path) in str(err.value) and "offset" in str(err.value)


def test_wrong_keypoint_count_rejected(tmp_path):
    path = tmp_path / FRAME_FILE.format(0)
    path.write_text(_frame_doc([[0.0, 0.0, 0.0]] * 16))
    with pytest.raises(IngestError):
        load_skeleton_json(str(path))
    path.write_text(_frame_doc({name: [0.0, 0.0] for name in default_joint_names()}))
    with pytest.raises(IngestError):
        load_skeleton_json(str(path))


def test_missing_skeleton_path(tmp_path):
    with pytest.raises(IngestError):
        load_skeleton_json(str(tmp_path / "absent"))


def test_obj_vertices_and_errors(tmp_path):
    path = tmp_path / "mesh.obj"
    vertices = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
    write_obj(str(path), vertices, faces=np.array([[0, 1, 0]]))
    assert np.array_equal(parse_obj(str(path)), vertices)

    bad = tmp_path / "bad.obj"
    bad.write_text("v 1.0 2.0 3.0\nv 1.0 oops 3.0\n")
    with pytest.raises(IngestError) as err:
        parse_obj(str(bad))
    assert ":2:" in str(err.value)

    empty = tmp_path / "empty.obj"
    empty.write_text("# nothing\nf 1 2 3\n")
    assert parse_obj(str(empty)).shape == (0, 3)
    with pytest.raises(IngestError):
        parse_obj(str(tmp_path / "absent.obj"))


def test_regression_is_linear_and_selects_one_hot_rows():
    r = np.random.default_rng(1)
    reg = JointRegressor(r.dirichlet(np.ones(6), size=4))
    a, b = r.normal(size=(6, 3)), r.normal(size=(6, 3))
    assert np.allclose(regress_joints(2.0 * a - b, reg), 2.0 * regress_joints(a, reg) - regress_joints(b, reg))

    one_hot = JointRegressor(np.eye(6)[[5, 0, 2]])
    assert np.array_equal(regress_joints(a, one_hot), a[[5, 0, 2]])
    with pytest.raises(ShapeError):
        regress_joints(r.normal(size=(5, 3)), reg)


def test_non_convex_regressor_warns(caplog):
    with caplog.at_level(logging.WARNING):
        reg = JointRegressor(np.array([[0.5, 0.6], [1.0, 0.0]]))
    assert "non-convex" in caplog.text
    assert reg.joint_names == ["joint_0", "joint_1"]


def test_regressor_file_roundtrip_and_truncation(tmp_path):
    reg = JointRegressor(np.random.default_rng(2).dirichlet(np.ones(5), size=3))
    path = tmp_path / "regressor.bin"
    reg.save(str(path))
    assert np.array_equal(JointRegressor.load(str(path)).matrix, reg.matrix)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(IngestError):
        JointRegressor.load(str(path))


def test_mesh_sequence_marks_empty_meshes_invalid(tmp_path):
    reg = JointRegressor(np.eye(3)[[0, 2]])
    full, empty = tmp_path / "a.obj", tmp_path / "b.obj"
    write_obj(str(full), np.arange(9, dtype=np.float64).reshape(3, 3))
    empty.write_text("")
    seq = regress_mesh_sequence([str(full), str(empty)], reg, pid=3, camid=0)
    assert seq.valid.tolist() == [True, False]
    assert np.array_equal(seq.joints[0], [[0.0, 1.0, 2.0], [6.0, 7.0, 8.0]])


def test_discard_keeps_modalities_aligned():
    r = np.random.default_rng(2024)
    for _ in range(1000):
        length = int(r.integers(1, 13))
        valid = r.random(length) < 0.6
        valid[r.integers(length)] = True
        joints = r.normal(size=(length, 5, 3))
        # a valid frame with all-zero joints counts as empty too
        zeroed = valid & (r.random(length) < 0.1)
        if zeroed.sum() == valid.sum():
            zeroed[:] = False
        joints[zeroed] = 0.0
        # image frames carry their index so the pairing can be checked
        frames = np.broadcast_to(np.arange(length, dtype=np.float64)[:, None, None, None], (length, 2, 2, 3))
        skeletons = SkeletonSequence(joints, 2, 0, valid)
        kept = discard_empty_frames(Tracklet(ImageSequence(frames, 2, 0), skeletons, 2, 0, tracklet_id="t"))
        index = np.nonzero(valid & ~zeroed)[0]
        assert kept.length == kept.skeletons.length == len(index)
        assert np.array_equal(kept.images.frames[:, 0, 0, 0], index.astype(np.float64))
        assert np.array_equal(kept.skeletons.joints, skeletons.joints[index])


def test_tracklet_modalities_must_share_length():
    with pytest.raises(ShapeError):
        Tracklet(ImageSequence(np.zeros((3, 2, 2, 3)), 7, 1), _sequence(length=2), 7, 1, tracklet_id="short")


def test_fully_empty_tracklet_rejected():
    skeletons = SkeletonSequence(np.zeros((2, 17, 3)), 1, 0)
    tracklet = Tracklet(ImageSequence(np.zeros((2, 2, 2, 3)), 1, 0), skeletons, 1, 0, tracklet_id="blank")
    with pytest.raises(DataError) as err:
        discard_empty_frames(tracklet)
    assert "blank" in str(err.value)
