"""Stage-1 skeleton-image alignment: projection heads and supervised contrastive losses."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src import tensor as T
from src.errors import ConfigurationError, DataError, ShapeError
from src.nn import Linear, Module
from src.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AlignedBatch:
    visual: Tensor     # B×C pooled visual features
    skeleton: Tensor   # B×C pooled skeleton features
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b = self.labels.shape[0]
        if self.visual.shape[0] != b or self.skeleton.shape[0] != b:
            raise DataError(f"aligned batch sizes differ: visual={self.visual.shape} "
                            f"skeleton={self.skeleton.shape} labels={self.labels.shape}")
        if b < 1:
            raise DataError("aligned batch is empty")

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


class AlignmentHeads(Module):
    """
    Linear projections of both modalities into a shared space.

    Args:
        visual_dim: Width of pooled visual features
        skeleton_dim: Width of pooled skeleton features
        rng: Initialization generator
        shared_dim: Projection width, defaults to ``visual_dim``
        tau: Contrastive temperature (fixed)
    """

    def __init__(self, visual_dim: int, skeleton_dim: int, rng: np.random.Generator,
                 shared_dim: Optional[int] = None, tau: float = 0.07):
        if tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {tau}")
        shared_dim = visual_dim if shared_dim is None else shared_dim
        self.tau = tau
        self.proj_v = Linear(visual_dim, shared_dim, rng)
        self.proj_s = Linear(skeleton_dim, shared_dim, rng)

    def project(self, batch: AlignedBatch) -> Tuple[Tensor, Tensor]:
        return self.proj_v(batch.visual), self.proj_s(batch.skeleton)


def similarity_matrix(batch: AlignedBatch, heads: AlignmentHeads) -> Tensor:
    """S[i, j] = J_v(v_i) · J_s(s_j), no normalization."""
    pv, ps = heads.project(batch)
    if pv.shape[-1] != ps.shape[-1]:
        raise ShapeError("similarity_matrix", pv.shape, ps.shape)
    return T.matmul(pv, T.transpose(ps))


def positive_mask(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def supervised_contrastive(similarity: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """
    Row-wise supervised contrastive loss of a B×B similarity matrix.

    For each row i: -1/|P_i| sum_{p in P_i} log softmax_j(S[i, j] / tau)[p],
    then the mean over rows. The denominator runs over the whole batch.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    positives = positive_mask(labels)
    log_prob = T.log_softmax(T.scale(similarity, 1.0 / tau))
    weights = positives / positives.sum(axis=1, keepdims=True)
    per_row = T.sum(log_prob * Tensor(weights), axis=1)
    return -T.mean(per_row)


def contrastive_losses(batch: AlignedBatch, heads: AlignmentHeads,
                       similarity: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """
    Visual-to-skeleton and skeleton-to-visual supervised contrastive losses.

    Args:
        batch: Pooled features and identity labels
        heads: Projection heads carrying the temperature
        similarity: Precomputed similarity matrix (defaults to ``similarity_matrix``)

    Returns:
        (L_v2s, L_s2v), each averaged over the batch
    """
    if similarity is None:
        similarity = similarity_matrix(batch, heads)
    l_v2s = supervised_contrastive(similarity, batch.labels, heads.tau)
    l_s2v = supervised_contrastive(T.transpose(similarity), batch.labels, heads.tau)
    return l_v2s, l_s2v
