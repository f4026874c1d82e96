"""Identity supervision for Stage 2: label-smoothed cross-entropy and batch-hard triplet."""

import logging
from dataclasses import dataclass

import numpy as np

from src import tensor as T
from src.errors import ConfigurationError, DataError, ShapeError
from src.nn import Linear, Module
from src.tensor import Tensor

logger = logging.getLogger(__name__)

# added to exactly-zero squared distances before sqrt, then masked back out
_ZERO_DIST_EPS = 1e-16


@dataclass
class CEConfig:
    num_classes: int
    smoothing: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigurationError(f"label smoothing must lie in [0, 1), got {self.smoothing}")
        if self.num_classes < 1:
            raise ConfigurationError("classifier needs at least one class")


@dataclass
class TripletConfig:
    margin: float = 0.3
    squared: bool = False

    def validate(self) -> None:
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ConfigurationError(f"triplet margin must be finite and non-negative, got {self.margin}")


class IdentityClassifier(Module):
    """Linear head C→K trained with label smoothing."""

    def __init__(self, dim: int, cfg: CEConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.fc = Linear(dim, cfg.num_classes, rng)

    def forward(self, features: Tensor) -> Tensor:
        return self.fc(features)


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    q = np.full((len(labels), num_classes), smoothing / num_classes)
    q[np.arange(len(labels)), labels] += 1.0 - smoothing
    return q


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float) -> Tensor:
    """Batch mean of -sum_k q_k log softmax(logits)_k with q = (1-eps)·onehot + eps/K."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError("smoothed_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label outside the {k} classes")
    q = smoothed_targets(labels, k, smoothing)
    return -T.mean(T.sum(T.log_softmax(logits) * Tensor(q), axis=1))


def ce_label_smoothing(features: Tensor, labels: np.ndarray, classifier: IdentityClassifier) -> Tensor:
    return smoothed_cross_entropy(classifier(features), labels, classifier.cfg.smoothing)


def check_pk_structure(labels: np.ndarray) -> None:
    _, counts = np.unique(labels, return_counts=True)
    if len(counts) < 2 or np.any(counts < 2):
        raise DataError("PK structure required: at least 2 identities with at least 2 samples each")


def pairwise_distance_matrix(features: Tensor, squared: bool = False) -> Tensor:
    """B×B (squared) Euclidean distances; coincident pairs are exactly 0 with zero gradient."""
    sq = T.pairwise_sq_dist(features, features)
    if squared:
        return sq
    zero = (sq.data == 0.0).astype(np.float64)
    return T.sqrt(sq + Tensor(zero * _ZERO_DIST_EPS)) * Tensor(1.0 - zero)


def batch_hard_triplet(features: Tensor, labels: np.ndarray, cfg: TripletConfig) -> Tensor:
    """
    Mean over anchors of max(0, d(a, hardest positive) - d(a, hardest negative) + margin).

    Args:
        features: B×C embeddings
        labels: B identities, PK-structured
        cfg: Margin and distance flavour
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    check_pk_structure(labels)
    dist = pairwise_distance_matrix(features, cfg.squared)
    same = labels[:, None] == labels[None, :]
    rows = np.arange(len(labels))
    hardest_pos = np.argmax(np.where(same, dist.data, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(same, np.inf, dist.data), axis=1)
    d_pos = dist[rows, hardest_pos]
    d_neg = dist[rows, hardest_neg]
    return T.mean(T.relu(d_pos - d_neg + cfg.margin))
