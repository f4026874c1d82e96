"""
Prototype Fusion Updater.

Per-identity prototypes of both modalities are pooled once from frozen
encoders, fused with a learned per-class gate and refreshed per batch sample
by attending to that sample's multimodal tokens. The refreshed prototypes
act as a classifier for the pooled visual feature.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from src import tensor as T
from src.errors import DataError, ShapeError
from src.nn import MLP2, Module, MultiHeadAttention, cross_attention, mlp2, self_attention
from src.tensor import Tensor

logger = logging.getLogger(__name__)


def intra_id_pool(features: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    """
    Mean feature of every identity.

    Args:
        features: N×C sequence-level features
        labels: N training labels in [0, K)
        num_classes: K, defaults to max label + 1

    Returns:
        K×C prototypes, row c the mean over samples labelled c
    """
    features = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=k)
    empty = np.nonzero(counts == 0)[0]
    if len(empty):
        raise DataError(f"identity {int(empty[0])} has no samples to pool a prototype from")
    sums = np.zeros((k, features.shape[1]))
    np.add.at(sums, labels, features)
    return sums / counts[:, None]


@dataclass
class ModalityPrototypes:
    skeleton: np.ndarray
    visual: np.ndarray
    # original pid -> training label
    identity_map: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.skeleton.shape != self.visual.shape:
            raise ShapeError("modality_prototypes", self.skeleton.shape, self.visual.shape)

    @property
    def num_classes(self) -> int:
        return self.skeleton.shape[0]

    @classmethod
    def pool(cls, skeleton_feats: np.ndarray, visual_feats: np.ndarray, labels: np.ndarray,
             num_classes: int, identity_map: Optional[Dict[int, int]] = None) -> "ModalityPrototypes":
        protos = cls(intra_id_pool(skeleton_feats, labels, num_classes),
                     intra_id_pool(visual_feats, labels, num_classes),
                     dict(identity_map or {}))
        logger.info(f"Pooled prototypes for {num_classes} identities")
        return protos


class FusionGate(Module):
    """alpha = sigmoid(MLP([P_S | P_V])), one weight per class."""

    def __init__(self, dim: int, rng: np.random.Generator, zero_init: bool = False):
        self.mlp = MLP2(2 * dim, dim, 1, rng, zero_init_output=zero_init)

    def forward(self, p_s: Tensor, p_v: Tensor) -> Tensor:
        return T.sigmoid(mlp2(T.concat([p_s, p_v], axis=1), self.mlp))


def fuse(p_s, p_v, gate: FusionGate) -> Tuple[Tensor, Tensor]:
    """
    Class-aware convex combination of the modality prototypes.

    Returns:
        (P_F: K×C, alpha: K×1)
    """
    p_s, p_v = T.as_tensor(p_s), T.as_tensor(p_v)
    if p_s.shape != p_v.shape:
        raise ShapeError("fuse", p_s.shape, p_v.shape)
    alpha = gate(p_s, p_v)
    a = T.broadcast_to(alpha, p_s.shape)
    return a * p_s + (1.0 - a) * p_v, alpha


class PrototypeUpdater(Module):
    """
    P_hat = P + MLP(CrossAttn(SelfAttn(P), F)).

    The MLP's final layer starts at zero so the update begins as the identity.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 expected_tokens: Optional[int] = None, mlp_ratio: int = 2):
        self.expected_tokens = expected_tokens
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = MLP2(dim, dim * mlp_ratio, dim, rng, zero_init_output=True)

    def forward(self, prototypes: Tensor, tokens: Tensor) -> Tensor:
        return update(prototypes, tokens, self)


def update(p_f: Tensor, fused_tokens: Tensor, updater: PrototypeUpdater) -> Tensor:
    """
    Refresh the fused prototypes against each sample's token sequence.

    Args:
        p_f: K×C fused prototypes
        fused_tokens: B×L×C per-sample tokens, L = (1+N_p) + (1+J)
        updater: Attention/MLP parameters

    Returns:
        B×K×C per-sample prototypes
    """
    fused_tokens = T.as_tensor(fused_tokens)
    if fused_tokens.ndim == 2:
        fused_tokens = T.reshape(fused_tokens, (1,) + fused_tokens.shape)
    b, length, c = fused_tokens.shape
    if updater.expected_tokens is not None and length != updater.expected_tokens:
        raise ShapeError("prototype_update", (updater.expected_tokens, c), (length, c))
    if p_f.shape[-1] != c:
        raise ShapeError("prototype_update", p_f.shape, fused_tokens.shape)
    k = p_f.shape[0]
    copies = T.broadcast_to(p_f, (b, k, c))
    attended = cross_attention(self_attention(copies, updater.self_attn), fused_tokens, updater.cross_attn)
    return copies + mlp2(attended, updater.mlp)


def prototype_loss(features: Tensor, labels: np.ndarray, prototypes: Tensor) -> Tensor:
    """
    Cross-entropy of softmax_k(f_i · P_hat[i, k]) toward the one-hot label, batch mean.

    Args:
        features: B×C pooled visual features
        labels: B training labels
        prototypes: B×K×C per-sample prototypes (a K×C matrix is shared)
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, c = features.shape
    if prototypes.ndim == 2:
        prototypes = T.broadcast_to(prototypes, (b,) + prototypes.shape)
    k = prototypes.shape[1]
    if prototypes.shape != (b, k, c):
        raise ShapeError("prototype_loss", features.shape, prototypes.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label outside the {k} prototypes")
    logits = T.reshape(T.matmul(prototypes, T.reshape(features, (b, c, 1))), (b, k))
    return -T.mean(T.log_softmax(logits)[np.arange(b), labels])


class PrototypeFusionUpdater(Module):
    """Gate + updater around a fixed pair of modality prototype banks."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 expected_tokens: Optional[int] = None, zero_init_gate: bool = False):
        self.gate = FusionGate(dim, rng, zero_init=zero_init_gate)
        self.updater = PrototypeUpdater(dim, heads, rng, expected_tokens=expected_tokens)
        self._prototypes: Optional[ModalityPrototypes] = None

    @property
    def prototypes(self) -> ModalityPrototypes:
        if self._prototypes is None:
            raise DataError("prototype banks have not been pooled yet")
        return self._prototypes

    def set_prototypes(self, prototypes: ModalityPrototypes) -> None:
        self._prototypes = prototypes

    @property
    def has_prototypes(self) -> bool:
        return self._prototypes is not None

    def classifier_prototypes(self, fused_tokens: Optional[Tensor], use_fusion: bool = True,
                              use_update: bool = True) -> Tensor:
        """
        Prototypes the visual features are scored against.

        Without fusion the visual bank is used directly; without update the
        (fused) bank is shared by every sample.
        """
        bank = self.prototypes
        if use_fusion:
            protos, _ = fuse(Tensor(bank.skeleton), Tensor(bank.visual), self.gate)
        else:
            protos = Tensor(bank.visual)
        if use_update:
            if fused_tokens is None:
                raise DataError("prototype update needs the fused token sequence")
            return update(protos, fused_tokens, self.updater)
        return protos

    def loss(self, features: Tensor, labels: np.ndarray, fused_tokens: Optional[Tensor],
             use_fusion: bool = True, use_update: bool = True) -> Tensor:
        protos = self.classifier_prototypes(fused_tokens, use_fusion, use_update)
        return prototype_loss(features, labels, protos)
