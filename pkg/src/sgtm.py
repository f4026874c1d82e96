"""
Skeleton-guided temporal modeling.

Each frame gets a visual and a skeleton message token (mean-pooled, projected,
mixed over time). During training the visual messages are enhanced by
cross-attending to the skeleton messages, and the full token set of every
frame (visual tokens, visual message, skeleton tokens, skeleton message) is
aggregated by one transformer block before attention pooling and a
per-frame identity loss. At test time only the visual side is assembled, so
features never depend on skeleton input.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src import tensor as T
from src.errors import ConfigurationError, DataError, ShapeError
from src.nn import Linear, Module, MultiHeadAttention, Parameter, TransformerBlock, cross_attention
from src.tensor import Tensor

logger = logging.getLogger(__name__)

VISUAL_TOKEN = 0
VISUAL_MESSAGE = 1
SKELETON_TOKEN = 2
SKELETON_MESSAGE = 3
NUM_TOKEN_TYPES = 4

TRAIN = "train"
TEST = "test"


class MessageTokenEncoder(Module):
    """Per-frame mean pooling, a linear projection and temporal self-attention."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.proj = Linear(dim, dim, rng)
        self.temporal = MultiHeadAttention(dim, heads, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        return mte(tokens, self.proj, self.temporal)


def mte(tokens: Tensor, proj: Linear, temporal_mhsa: MultiHeadAttention) -> Tensor:
    """
    Args:
        tokens: B×T×L×C (or T×L×C) frame tokens

    Returns:
        B×T×C (or T×C) message tokens
    """
    pooled = T.mean(tokens, axis=tokens.ndim - 2)
    return temporal_mhsa(proj(pooled))


class AuxiliaryTemporalDistillation(Module):
    """m_hat = m_vis + CrossAttn(q=m_vis, kv=m_ske); output projection starts at zero."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_init: bool = True):
        self.attn = MultiHeadAttention(dim, heads, rng, zero_init_output=zero_init)

    def forward(self, m_vis: Tensor, m_ske: Tensor) -> Tensor:
        return atd(m_vis, m_ske, self)


def atd(m_vis: Tensor, m_ske: Tensor, module: AuxiliaryTemporalDistillation) -> Tensor:
    if m_vis.shape != m_ske.shape:
        raise ShapeError("atd", m_vis.shape, m_ske.shape)
    return m_vis + cross_attention(m_vis, m_ske, module.attn)


class TypeEmbeddingTable(Module):
    """One learnable row per token type."""

    def __init__(self, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, std, size=(NUM_TOKEN_TYPES, dim)))


@dataclass
class UnifiedTokenSequence:
    tokens: Tensor          # (B·T)×L×C, one column per (sample, frame)
    types: np.ndarray       # L token-type ids
    mode: str
    batch: int
    frames: int

    @property
    def length(self) -> int:
        return int(self.types.shape[0])


def token_types(visual_tokens: int, skeleton_tokens: int, mode: str) -> np.ndarray:
    parts = [np.full(visual_tokens, VISUAL_TOKEN), [VISUAL_MESSAGE]]
    if mode == TRAIN:
        parts += [np.full(skeleton_tokens, SKELETON_TOKEN), [SKELETON_MESSAGE]]
    return np.concatenate(parts).astype(np.int64)


def assemble(visual_tokens: Tensor, m_vis: Tensor, skeleton_tokens: Optional[Tensor],
             m_ske: Optional[Tensor], table: TypeEmbeddingTable, mode: str) -> UnifiedTokenSequence:
    """
    Concatenate the tokens of every (sample, frame) and add type embeddings.

    Args:
        visual_tokens: B×T×(1+N_p)×C
        m_vis: B×T×C (enhanced) visual messages
        skeleton_tokens: B×T×(1+J)×C, ignored in test mode
        m_ske: B×T×C skeleton messages, ignored in test mode
        table: Type embeddings
        mode: "train" or "test"
    """
    if mode not in (TRAIN, TEST):
        raise ConfigurationError(f"unknown assembly mode '{mode}'")
    b, t, lv, c = visual_tokens.shape
    if m_vis.shape != (b, t, c):
        raise ShapeError("assemble", visual_tokens.shape, m_vis.shape)
    parts = [visual_tokens, T.reshape(m_vis, (b, t, 1, c))]
    ls = 0
    if mode == TRAIN:
        if skeleton_tokens is None or m_ske is None:
            raise DataError("training assembly needs skeleton tokens and messages")
        if skeleton_tokens.shape[:2] != (b, t) or m_ske.shape != (b, t, c):
            raise ShapeError("assemble", visual_tokens.shape, skeleton_tokens.shape)
        ls = skeleton_tokens.shape[2]
        parts += [skeleton_tokens, T.reshape(m_ske, (b, t, 1, c))]
    types = token_types(lv, ls, mode)
    tokens = T.concat(parts, axis=2)
    tokens = tokens + T.broadcast_to(T.embedding(table.weight, types), tokens.shape)
    return UnifiedTokenSequence(T.reshape(tokens, (b * t, len(types), c)), types, mode, b, t)


def temporal_aggregate(x: UnifiedTokenSequence, block: TransformerBlock) -> UnifiedTokenSequence:
    """Self-attention plus FFN along the token axis of every (sample, frame) column."""
    return UnifiedTokenSequence(block(x.tokens), x.types, x.mode, x.batch, x.frames)


class FrameClassifier(Module):
    """Attention pooling over a column's tokens followed by a linear identity head."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.query = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim))
        self.classifier = Linear(dim, num_classes, rng)

    def pool(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        """N×L×C → (z: N×C, weights: N×L)."""
        n, length, c = tokens.shape
        scores = T.reshape(T.matmul(tokens, T.reshape(self.query, (c, 1))), (n, length))
        weights = T.softmax(scores)
        z = T.matmul(T.reshape(weights, (n, 1, length)), tokens)
        return T.reshape(z, (n, c)), weights


def frame_logits_and_loss(x: UnifiedTokenSequence, classifier: FrameClassifier,
                          labels: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Per-frame identity cross-entropy, summed over samples and frames and
    divided by B·T.

    Returns:
        (z: B×T×C pooled frame features, L_Frame)
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != x.batch:
        raise ShapeError("frame_logits_and_loss", (x.batch,), labels.shape)
    k = classifier.classifier.out_dim
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label outside the {k} frame classes")
    z, _ = classifier.pool(x.tokens)
    log_p = T.log_softmax(classifier.classifier(z))
    targets = np.repeat(labels, x.frames)
    loss = -T.sum(log_p[np.arange(x.batch * x.frames), targets]) / (x.batch * x.frames)
    return T.reshape(z, (x.batch, x.frames, z.shape[-1])), loss


def inference_features(visual_tokens: Tensor, m_vis: Tensor, table: TypeEmbeddingTable,
                       block: TransformerBlock, skeleton_tokens: Optional[Tensor] = None,
                       m_ske: Optional[Tensor] = None) -> Tensor:
    """
    Test-mode tracklet features: assemble without skeleton input, aggregate,
    then average over tokens and frames. Skeleton arguments are accepted and
    never read.

    Returns:
        B×C
    """
    x = temporal_aggregate(assemble(visual_tokens, m_vis, None, None, table, TEST), block)
    per_frame = T.mean(x.tokens, axis=1)
    return T.mean(T.reshape(per_frame, (x.batch, x.frames, per_frame.shape[-1])), axis=1)


class SkeletonGuidedTemporalModel(Module):
    """
    Args:
        dim: Shared token width
        heads: Attention heads
        num_classes: Training identities for the frame loss
        rng: Initialization generator
        mlp_ratio: Hidden width multiplier of the aggregation block
    """

    def __init__(self, dim: int, heads: int, num_classes: int, rng: np.random.Generator,
                 mlp_ratio: int = 2):
        self.mte_vis = MessageTokenEncoder(dim, heads, rng)
        self.mte_ske = MessageTokenEncoder(dim, heads, rng)
        self.atd = AuxiliaryTemporalDistillation(dim, heads, rng)
        self.types = TypeEmbeddingTable(dim, rng)
        self.aggregate = TransformerBlock(dim, heads, rng, mlp_ratio=mlp_ratio)
        self.frame_head = FrameClassifier(dim, num_classes, rng)

    def training_loss(self, visual_tokens: Tensor, skeleton_tokens: Tensor, labels: np.ndarray,
                      use_atd: bool = True) -> Tuple[Tensor, Tensor]:
        """Returns (L_Frame, z)."""
        m_vis = self.mte_vis(visual_tokens)
        m_ske = self.mte_ske(skeleton_tokens)
        m_hat = self.atd(m_vis, m_ske) if use_atd else m_vis
        x = temporal_aggregate(assemble(visual_tokens, m_hat, skeleton_tokens, m_ske, self.types, TRAIN),
                               self.aggregate)
        z, loss = frame_logits_and_loss(x, self.frame_head, labels)
        return loss, z

    def features(self, visual_tokens: Tensor, skeleton_tokens: Optional[Tensor] = None) -> Tensor:
        """Retrieval features; m_hat equals m_vis because skeleton messages are unavailable."""
        m_vis = self.mte_vis(visual_tokens)
        return inference_features(visual_tokens, m_vis, self.types, self.aggregate, skeleton_tokens)
