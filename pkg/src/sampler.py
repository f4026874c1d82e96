"""PK batch construction and fixed-length frame sampling."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src import rng as rng_streams
from src.errors import ConfigurationError, DataError
from src.ingest import discard_empty_frames
from src.tracklet import Tracklet

logger = logging.getLogger(__name__)


def _by_identity(pids: Sequence[int]) -> dict:
    groups = {}
    for index, pid in enumerate(pids):
        groups.setdefault(int(pid), []).append(index)
    return groups


def _draw_tracklets(indices: List[int], k: int, pid: int, r: np.random.Generator) -> np.ndarray:
    if len(indices) >= k:
        return r.choice(indices, size=k, replace=False)
    logger.warning(f"Identity {pid} has {len(indices)} tracklets, sampling {k} with replacement")
    return r.choice(indices, size=k, replace=True)


def pk_sample(pids: Sequence[int], p: int, k: int, r: np.random.Generator) -> np.ndarray:
    """
    One batch of P distinct identities with K tracklets each.

    Args:
        pids: Identity of every dataset entry
        p: Identities per batch
        k: Tracklets per identity
        r: Random stream

    Returns:
        P·K dataset indices, identity-major
    """
    if p < 1 or k < 1:
        raise ConfigurationError(f"PK sampling needs P >= 1 and K >= 1, got P={p} K={k}")
    groups = _by_identity(pids)
    if len(groups) < p:
        raise DataError(f"PK sampling needs {p} identities, dataset has {len(groups)}")
    chosen = r.choice(sorted(groups), size=p, replace=False)
    return np.concatenate([_draw_tracklets(groups[int(pid)], k, int(pid), r) for pid in chosen])


def pk_epoch(pids: Sequence[int], p: int, k: int, seed: int, epoch: int) -> List[np.ndarray]:
    """
    Batches for one epoch: identities are shuffled and split into groups of P,
    so every identity appears in exactly one batch (a short remainder is dropped).
    """
    groups = _by_identity(pids)
    if len(groups) < p:
        raise DataError(f"PK sampling needs {p} identities, dataset has {len(groups)}")
    r = rng_streams.stream(seed, "pk", epoch)
    order = r.permutation(sorted(groups))
    batches = []
    for start in range(0, len(order) - p + 1, p):
        batch = [_draw_tracklets(groups[int(pid)], k, int(pid), r) for pid in order[start:start + p]]
        batches.append(np.concatenate(batch))
    return batches


def sequential_batches(n: int, batch_size: int, r: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Plain (optionally shuffled) minibatches covering all n entries."""
    order = np.arange(n) if r is None else r.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def sample_frames(length: int, frames: int, r: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Pick ``frames`` indices from a tracklet of ``length``.

    Longer tracklets are cut into equal chunks with one index per chunk (chunk
    start without a stream, a random member with one); shorter tracklets are
    cyclically repeated.
    """
    if length < 1 or frames < 1:
        raise DataError(f"cannot sample {frames} frames from a tracklet of {length}")
    if length < frames:
        return np.sort(np.resize(np.arange(length), frames))
    edges = np.linspace(0, length, frames + 1).astype(int)
    if r is None:
        return edges[:-1]
    return np.array([r.integers(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])


def collate(tracklets: Sequence[Tracklet], frames: int,
            r: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stack tracklets into fixed-length arrays. Frames without a skeleton are
    dropped from both modalities before sampling.

    Returns:
        (images: B×T×H×W×3, joints: B×T×J×3)
    """
    images, joints = [], []
    for tracklet in map(discard_empty_frames, tracklets):
        index = sample_frames(tracklet.length, frames, r)
        images.append(tracklet.images.frames[index])
        joints.append(tracklet.skeletons.joints[index])
    return np.stack(images), np.stack(joints)
