"""
Synthetic paired tracklets.

Every identity has a body shape and a gait (skeleton side, also visible in the
rendered silhouette) and a two-colour outfit (image side only). Frames are
rendered as coarse blocks at the projected joints over a camera-tinted
background. All draws come from streams keyed by (seed, pid), so the dataset
is a pure function of the config.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from src import rng as rng_streams
from src.checkpoint import load_container, save_container
from src.errors import ConfigurationError, IngestError
from src.ingest import discard_empty_frames, load_skeleton_json, write_skeleton_json
from src.skeleton_encoder import SkeletonGraph
from src.tracklet import ImageSequence, SkeletonSequence, Tracklet

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SPLITS = ("train", "query", "gallery")
# joints 0..6 are hips and legs; the rest wear the upper colour
LOWER_BODY = 7
# world window rendered into the frame, metres
VIEW_X = (-0.45, 0.45)
VIEW_Y = (-0.05, 2.05)


@dataclass
class SyntheticConfig:
    num_identities: int = 16
    tracklets_per_identity: int = 8
    frames: int = 4
    image_height: int = 32
    image_width: int = 16
    num_cameras: int = 2
    # trailing tracklets of every identity kept out of training (alternating query/gallery)
    holdout_tracklets: int = 2
    # identities whose tracklets only appear in query/gallery
    heldout_identities: int = 0
    skeleton_noise: float = 0.01
    image_noise: float = 0.02
    camera_bias: float = 0.1
    phase_jitter: bool = True
    block_radius: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigurationError("synthetic data needs at least 2 identities")
        if self.frames < 1 or self.tracklets_per_identity < 1 or self.num_cameras < 1:
            raise ConfigurationError("frames, tracklets and cameras must be positive")
        if not 0 <= self.holdout_tracklets < self.tracklets_per_identity:
            raise ConfigurationError(
                f"holdout_tracklets={self.holdout_tracklets} must leave training tracklets "
                f"out of {self.tracklets_per_identity}")
        if not 0 <= self.heldout_identities < self.num_identities:
            raise ConfigurationError("heldout_identities must leave at least one training identity")
        if min(self.skeleton_noise, self.image_noise, self.camera_bias) < 0:
            raise ConfigurationError("noise levels must be non-negative")

    @property
    def total_tracklets(self) -> int:
        return self.num_identities * self.tracklets_per_identity


@dataclass
class SyntheticIdentity:
    pid: int
    upper_color: np.ndarray
    lower_color: np.ndarray
    height_scale: float
    width_scale: float
    amplitude: np.ndarray   # J×3 metres
    phase: np.ndarray       # J radians
    frequency: float        # cycles per frame

    @classmethod
    def draw(cls, pid: int, num_joints: int, seed: int) -> "SyntheticIdentity":
        r = rng_streams.stream(seed, "identity", pid)
        return cls(
            pid=pid,
            upper_color=r.uniform(0.0, 1.0, size=3),
            lower_color=r.uniform(0.0, 1.0, size=3),
            height_scale=float(r.uniform(0.8, 1.15)),
            width_scale=float(r.uniform(0.7, 1.3)),
            amplitude=r.uniform(0.0, 0.08, size=(num_joints, 3)),
            phase=r.uniform(0.0, 2 * np.pi, size=num_joints),
            frequency=float(r.uniform(0.08, 0.25)),
        )

    def pose(self, rest_pose: np.ndarray, frames: int, offset: float) -> np.ndarray:
        """Noise-free T×J×3 walking sequence starting at phase ``offset``."""
        body = rest_pose * np.array([self.width_scale, self.height_scale, 1.0])
        t = np.arange(frames)[:, None]
        angle = 2 * np.pi * self.frequency * t + self.phase[None, :] + offset
        return body[None] + self.amplitude[None] * np.sin(angle)[..., None]


@dataclass
class DatasetSplits:
    train: List[Tracklet] = field(default_factory=list)
    query: List[Tracklet] = field(default_factory=list)
    gallery: List[Tracklet] = field(default_factory=list)
    # training pid -> contiguous label
    label_map: Dict[int, int] = field(default_factory=dict)

    def split(self, name: str) -> List[Tracklet]:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split '{name}'")
        return getattr(self, name)

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def labels(self, tracklets: List[Tracklet]) -> np.ndarray:
        return np.array([self.label_map[t.pid] for t in tracklets], dtype=np.int64)


def camera_tint(seed: int, camid: int, strength: float) -> np.ndarray:
    return rng_streams.stream(seed, "camera", camid).uniform(-strength, strength, size=3)


def render_frames(joints: np.ndarray, identity: SyntheticIdentity, tint: np.ndarray,
                  cfg: SyntheticConfig, r: np.random.Generator) -> np.ndarray:
    """T×J×3 joints → T×H×W×3 block rasters with values in [0, 1]."""
    h, w = cfg.image_height, cfg.image_width
    frames = np.empty((joints.shape[0], h, w, 3))
    frames[...] = 0.35 + tint
    cols = ((joints[..., 0] - VIEW_X[0]) / (VIEW_X[1] - VIEW_X[0]) * w).astype(int)
    rows = ((VIEW_Y[1] - joints[..., 1]) / (VIEW_Y[1] - VIEW_Y[0]) * h).astype(int)
    rad = cfg.block_radius
    for t in range(joints.shape[0]):
        for j in range(joints.shape[1]):
            color = identity.lower_color if j < LOWER_BODY else identity.upper_color
            r0, c0 = np.clip(rows[t, j], 0, h - 1), np.clip(cols[t, j], 0, w - 1)
            frames[t, max(r0 - rad, 0):r0 + rad + 1, max(c0 - rad, 0):c0 + rad + 1] = color
    if cfg.image_noise > 0:
        frames += r.normal(0.0, cfg.image_noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def identity_tracklets(identity: SyntheticIdentity, graph: SkeletonGraph,
                       cfg: SyntheticConfig) -> List[Tracklet]:
    r = rng_streams.stream(cfg.seed, "tracklets", identity.pid)
    tracklets = []
    for k in range(cfg.tracklets_per_identity):
        camid = k % cfg.num_cameras
        offset = float(r.uniform(0.0, 2 * np.pi)) if cfg.phase_jitter else 0.0
        joints = identity.pose(graph.rest_pose, cfg.frames, offset)
        if cfg.skeleton_noise > 0:
            joints = joints + r.normal(0.0, cfg.skeleton_noise, size=joints.shape)
        images = render_frames(joints, identity, camera_tint(cfg.seed, camid, cfg.camera_bias), cfg, r)
        tracklets.append(Tracklet(
            images=ImageSequence(images, identity.pid, camid),
            skeletons=SkeletonSequence(joints, identity.pid, camid),
            pid=identity.pid,
            camid=camid,
            source="synthetic",
            tracklet_id=f"{identity.pid:04d}_{k:02d}",
        ))
    return tracklets


def generate_dataset(cfg: SyntheticConfig, graph: Optional[SkeletonGraph] = None) -> DatasetSplits:
    """
    Build train/query/gallery splits.

    Training identities contribute their leading tracklets to ``train`` and the
    trailing ``holdout_tracklets`` alternately to query and gallery; held-out
    identities contribute only to query/gallery.
    """
    cfg.validate()
    graph = graph or SkeletonGraph.human36m()
    if graph.rest_pose is None:
        raise ConfigurationError("skeleton graph has no rest pose to animate")
    splits = DatasetSplits()
    first_heldout = cfg.num_identities - cfg.heldout_identities
    for pid in range(cfg.num_identities):
        identity = SyntheticIdentity.draw(pid, graph.num_joints, cfg.seed)
        tracklets = identity_tracklets(identity, graph, cfg)
        if pid >= first_heldout:
            kept, evaluation = [], tracklets
        else:
            cut = cfg.tracklets_per_identity - cfg.holdout_tracklets
            kept, evaluation = tracklets[:cut], tracklets[cut:]
            splits.label_map[pid] = len(splits.label_map)
        splits.train.extend(kept)
        splits.query.extend(evaluation[0::2])
        splits.gallery.extend(evaluation[1::2])
    logger.info(f"Generated {cfg.total_tracklets} tracklets: train={len(splits.train)} "
                f"query={len(splits.query)} gallery={len(splits.gallery)}")
    return splits


# -- on-disk layout ----------------------------------------------------------------

def _tracklet_dir(root: str, tracklet: Tracklet) -> str:
    return os.path.join(root, f"{tracklet.pid:04d}", tracklet.tracklet_id)


def save_dataset(root: str, splits: DatasetSplits, cfg: Optional[SyntheticConfig] = None) -> str:
    """
    Write ``<pid>/<tracklet>/images.bin`` + ``skeleton/frame_XXXX.json`` per
    tracklet and a manifest listing the splits.

    Returns:
        Manifest path
    """
    os.makedirs(root, exist_ok=True)
    manifest = {
        "config": asdict(cfg) if cfg is not None else None,
        "label_map": {str(pid): label for pid, label in sorted(splits.label_map.items())},
        "splits": {},
    }
    for name in SPLITS:
        entries = []
        for tracklet in splits.split(name):
            directory = _tracklet_dir(root, tracklet)
            save_container(os.path.join(directory, "images.bin"), {"frames": tracklet.images.frames})
            write_skeleton_json(os.path.join(directory, "skeleton"), tracklet.skeletons)
            entries.append({
                "tracklet_id": tracklet.tracklet_id,
                "pid": tracklet.pid,
                "camid": tracklet.camid,
                "frames": tracklet.length,
                "path": os.path.relpath(directory, root),
            })
        manifest["splits"][name] = entries
    path = os.path.join(root, MANIFEST)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved dataset to {root}")
    return path


def load_dataset(root: str) -> DatasetSplits:
    path = os.path.join(root, MANIFEST)
    if not os.path.exists(path):
        raise IngestError(f"dataset manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise IngestError(f"{path}: malformed JSON at offset {e.pos}: {e.msg}") from None
    splits = DatasetSplits(label_map={int(pid): label for pid, label in manifest["label_map"].items()})
    for name in SPLITS:
        for entry in manifest["splits"].get(name, []):
            directory = os.path.join(root, entry["path"])
            frames = load_container(os.path.join(directory, "images.bin"))["frames"]
            skeletons = load_skeleton_json(os.path.join(directory, "skeleton"), num_frames=entry["frames"],
                                           pid=entry["pid"], camid=entry["camid"])
            splits.split(name).append(discard_empty_frames(Tracklet(
                images=ImageSequence(frames, entry["pid"], entry["camid"]),
                skeletons=skeletons,
                pid=entry["pid"],
                camid=entry["camid"],
                source="synthetic",
                tracklet_id=entry["tracklet_id"],
            )))
    return splits
