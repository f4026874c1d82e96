"""
Real-format ingestion: per-frame skeleton JSON, Wavefront .obj vertices,
joint regressor files, and the empty-frame rule shared by every tracklet.
"""

import json
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np

from src.errors import DataError, IngestError, ShapeError
from src.tracklet import SkeletonSequence, Tracklet

logger = logging.getLogger(__name__)

FRAME_FILE = "frame_{:04d}.json"
FRAME_PATTERN = re.compile(r"^frame_(\d+)\.json$")
CONVEX_TOL = 1e-6


@lru_cache(maxsize=1)
def default_joint_names() -> tuple:
    from src.skeleton_encoder import SkeletonGraph
    return tuple(SkeletonGraph.human36m().joint_names)


# -- skeleton JSON -------------------------------------------------------------

def write_skeleton_json(directory: str, seq: SkeletonSequence,
                        joint_names: Optional[Sequence[str]] = None) -> List[str]:
    """
    Write one JSON file per valid frame; invalid frames are left out.

    Returns:
        Paths written
    """
    names = list(joint_names or default_joint_names())
    if seq.joints.shape[1] != len(names):
        raise ShapeError("write_skeleton_json", seq.joints.shape, (len(names), 3))
    os.makedirs(directory, exist_ok=True)
    written = []
    for t in range(seq.length):
        if not seq.valid[t]:
            continue
        doc = {
            "frame": t,
            "pid": int(seq.pid),
            "camid": int(seq.camid),
            "keypoints": {name: [float(v) for v in seq.joints[t, j]] for j, name in enumerate(names)},
        }
        path = os.path.join(directory, FRAME_FILE.format(t))
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        written.append(path)
    return written


def _parse_frame(path: str, names: Sequence[str]) -> Optional[dict]:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text.strip():
        logger.debug(f"Short skeleton file {path}, frame marked invalid")
        return None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise IngestError(f"{path}: malformed JSON at offset {e.pos}: {e.msg}") from None
    keypoints = doc.get("keypoints") if isinstance(doc, dict) else None
    if keypoints is None:
        raise IngestError(f"{path}: missing 'keypoints'")
    if len(keypoints) != len(names):
        raise IngestError(f"{path}: expected {len(names)} keypoints, got {len(keypoints)}")
    if isinstance(keypoints, dict):
        missing = [n for n in names if n not in keypoints]
        if missing:
            raise IngestError(f"{path}: unknown keypoint layout, missing {missing[:3]}")
        rows = [keypoints[n] for n in names]
    else:
        rows = keypoints
    try:
        joints = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        raise IngestError(f"{path}: keypoints must be numeric triples") from None
    if joints.shape != (len(names), 3):
        raise IngestError(f"{path}: keypoints must be numeric triples, got shape {joints.shape}")
    return {"joints": joints, "pid": doc.get("pid"), "camid": doc.get("camid")}


def load_skeleton_json(path: str, num_frames: Optional[int] = None,
                       joint_names: Optional[Sequence[str]] = None,
                       pid: Optional[int] = None, camid: Optional[int] = None) -> SkeletonSequence:
    """
    Read a directory of ``frame_XXXX.json`` files (or a single frame file).

    Args:
        path: Frame directory or one frame file
        num_frames: Sequence length; defaults to the highest frame index + 1
        joint_names: Expected keypoint names, Human3.6M order by default
        pid: Identity label, taken from the files when omitted
        camid: Camera label, taken from the files when omitted

    Returns:
        SkeletonSequence whose missing or short frames are masked invalid
    """
    names = list(joint_names or default_joint_names())
    if os.path.isfile(path):
        indexed = {0: path}
    elif os.path.isdir(path):
        indexed = {}
        for entry in os.listdir(path):
            match = FRAME_PATTERN.match(entry)
            if match:
                indexed[int(match.group(1))] = os.path.join(path, entry)
    else:
        raise IngestError(f"skeleton path not found: {path}")
    if num_frames is None:
        if not indexed:
            raise IngestError(f"{path}: no skeleton frame files")
        num_frames = max(indexed) + 1

    joints = np.zeros((num_frames, len(names), 3))
    valid = np.zeros(num_frames, dtype=bool)
    file_pid, file_camid = None, None
    for t in range(num_frames):
        if t not in indexed:
            continue
        frame = _parse_frame(indexed[t], names)
        if frame is None:
            continue
        joints[t] = frame["joints"]
        valid[t] = True
        file_pid = frame["pid"] if file_pid is None else file_pid
        file_camid = frame["camid"] if file_camid is None else file_camid

    pid = pid if pid is not None else (file_pid if file_pid is not None else -1)
    camid = camid if camid is not None else (file_camid if file_camid is not None else -1)
    if not valid.all():
        logger.info(f"{path}: {int((~valid).sum())} of {num_frames} frames missing or short")
    return SkeletonSequence(joints, int(pid), int(camid), valid)


# -- meshes and joint regression -------------------------------------------------

def parse_obj(path: str) -> np.ndarray:
    """
    Vertex coordinates of a Wavefront .obj file (``v x y z`` lines only).

    Returns:
        V×3 array, empty when the file has no vertex lines
    """
    if not os.path.exists(path):
        raise IngestError(f"mesh not found: {path}")
    vertices = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.startswith("v "):
                continue
            fields = line.split()[1:4]
            try:
                if len(fields) != 3:
                    raise ValueError
                vertices.append([float(v) for v in fields])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: non-numeric vertex line '{line.strip()}'") from None
    if not vertices:
        logger.warning(f"{path}: no vertex lines found")
        return np.zeros((0, 3))
    return np.array(vertices, dtype=np.float64)


def write_obj(path: str, vertices: np.ndarray, faces: Optional[np.ndarray] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# mesh\n")
        for x, y, z in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {x!r} {y!r} {z!r}\n")
        for face in ([] if faces is None else faces):
            f.write("f " + " ".join(str(int(i) + 1) for i in face) + "\n")


@dataclass
class JointRegressor:
    """J_out×V matrix mapping mesh vertices to joints."""
    matrix: np.ndarray
    joint_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError("joint_regressor", self.matrix.shape)
        if not self.joint_names:
            rows = self.matrix.shape[0]
            names = default_joint_names()
            self.joint_names = list(names) if rows == len(names) else [f"joint_{i}" for i in range(rows)]
        row_sums = self.matrix.sum(axis=1)
        non_convex = np.nonzero((np.abs(row_sums - 1.0) > CONVEX_TOL) | np.any(self.matrix < 0, axis=1))[0]
        if len(non_convex):
            logger.warning(f"Joint regressor has {len(non_convex)} non-convex rows (first: {int(non_convex[0])})")

    @property
    def shape(self):
        return self.matrix.shape

    def save(self, path: str) -> None:
        """Header ``uint32 rows, uint32 cols`` then row-major little-endian float64."""
        rows, cols = self.matrix.shape
        with open(path, "wb") as f:
            f.write(struct.pack("<II", rows, cols))
            f.write(self.matrix.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path: str, joint_names: Optional[Sequence[str]] = None) -> "JointRegressor":
        if not os.path.exists(path):
            raise IngestError(f"regressor not found: {path}")
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < 8:
            raise IngestError(f"{path}: truncated regressor header at offset {len(blob)}")
        rows, cols = struct.unpack_from("<II", blob, 0)
        expected = 8 + rows * cols * 8
        if len(blob) != expected:
            raise IngestError(f"{path}: expected {expected} bytes for a {rows}×{cols} regressor, "
                              f"found {len(blob)}")
        matrix = np.frombuffer(blob, dtype="<f8", offset=8).astype(np.float64).reshape(rows, cols)
        return cls(matrix, list(joint_names or []))


def regress_joints(vertices: np.ndarray, reg: JointRegressor) -> np.ndarray:
    """J = J_reg · V."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or reg.matrix.shape[1] != vertices.shape[0]:
        raise ShapeError("regress_joints", reg.matrix.shape, vertices.shape)
    return reg.matrix @ vertices


def regress_mesh_sequence(obj_paths: Sequence[str], reg: JointRegressor, pid: int = -1,
                          camid: int = -1) -> SkeletonSequence:
    """One skeleton frame per mesh; meshes without vertices become invalid frames."""
    joints = np.zeros((len(obj_paths), reg.matrix.shape[0], 3))
    valid = np.zeros(len(obj_paths), dtype=bool)
    for t, path in enumerate(obj_paths):
        vertices = parse_obj(path)
        if len(vertices) == 0:
            continue
        joints[t] = regress_joints(vertices, reg)
        valid[t] = True
    return SkeletonSequence(joints, pid, camid, valid)


# -- empty frames ------------------------------------------------------------------

def discard_empty_frames(tracklet: Tracklet) -> Tracklet:
    """Drop frames whose skeleton is masked or all-zero from both modalities, keeping order."""
    keep = ~tracklet.skeletons.empty_frames()
    if not keep.any():
        raise DataError(f"tracklet fully empty: '{tracklet.tracklet_id}'")
    if keep.all():
        return tracklet
    return tracklet.select_frames(np.nonzero(keep)[0])
