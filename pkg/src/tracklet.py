"""Paired image/skeleton sequences of a single person."""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from src.errors import DataError, ShapeError


@dataclass
class ImageSequence:
    """T×H×W×3 frames with values in [0, 1]."""
    frames: np.ndarray
    pid: int
    camid: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.shape[0] < 1:
            raise DataError(f"image sequence must be T×H×W×3 with T >= 1, got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SkeletonSequence:
    """T×J×3 joint coordinates plus a per-frame validity mask."""
    joints: np.ndarray
    pid: int
    camid: int
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.joints = np.array(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[-1] != 3:
            raise DataError(f"skeleton sequence must be T×J×3, got {self.joints.shape}")
        if self.valid is None:
            self.valid = np.ones(self.joints.shape[0], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        # invalid frames carry all-zero joints
        self.joints[~self.valid] = 0.0

    @property
    def length(self) -> int:
        return self.joints.shape[0]

    def empty_frames(self) -> np.ndarray:
        """Frames that are masked invalid or whose joints are all zero."""
        all_zero = ~np.any(self.joints.reshape(self.length, -1) != 0.0, axis=1)
        return ~self.valid | all_zero


@dataclass
class Tracklet:
    images: ImageSequence
    skeletons: SkeletonSequence
    pid: int
    camid: int
    source: str = "synthetic"
    tracklet_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.pid != self.pid or self.skeletons.pid != self.pid:
            raise DataError(f"tracklet {self.tracklet_id}: pid differs between modalities")
        if self.images.length != self.skeletons.length:
            raise ShapeError(f"tracklet '{self.tracklet_id}'", self.images.frames.shape[:1],
                             self.skeletons.joints.shape[:1])

    @property
    def length(self) -> int:
        return self.images.length

    def select_frames(self, index: np.ndarray) -> "Tracklet":
        """New tracklet with the given frame indices taken from both modalities."""
        index = np.asarray(index, dtype=np.int64)
        images = replace(self.images, frames=self.images.frames[index])
        skeletons = SkeletonSequence(self.skeletons.joints[index], self.pid, self.camid,
                                     self.skeletons.valid[index])
        return replace(self, images=images, skeletons=skeletons)
