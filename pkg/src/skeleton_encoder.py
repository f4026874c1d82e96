"""
Skeleton Graph Transformer: graph embedding with Laplacian positional
encoding, full-relation attention over the joints of each frame, frame and
sequence pooling, and the two self-training losses (prototype contrast and
masked reconstruction).
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src import tensor as T
from src.errors import ConfigurationError, DataError, GraphError
from src.nn import Linear, Module, MultiHeadAttention, Parameter, TransformerBlock
from src.tensor import Tensor
from src.tracklet import SkeletonSequence

logger = logging.getLogger(__name__)

DEFAULT_GRAPH_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                                  "data", "h36m_skeleton.json")
EIGEN_TOL = 1e-9


@dataclass
class SkeletonGraph:
    joint_names: List[str]
    adjacency: np.ndarray
    rest_pose: Optional[np.ndarray] = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        j = len(self.joint_names)
        if self.adjacency.shape != (j, j):
            raise GraphError(f"adjacency must be {j}×{j}, got {self.adjacency.shape}")
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(self.adjacency) != 0):
            raise GraphError("adjacency must have a zero diagonal")
        if not np.all(np.isin(self.adjacency, (0.0, 1.0))):
            raise GraphError("adjacency entries must be 0 or 1")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @classmethod
    def from_edges(cls, joint_names: Sequence[str], edges: Sequence[Sequence[int]],
                   rest_pose=None) -> "SkeletonGraph":
        j = len(joint_names)
        adjacency = np.zeros((j, j))
        for a, b in edges:
            if a == b or not (0 <= a < j and 0 <= b < j):
                raise GraphError(f"invalid edge ({a}, {b}) for {j} joints")
            adjacency[a, b] = adjacency[b, a] = 1.0
        pose = None if rest_pose is None else np.asarray(rest_pose, dtype=np.float64)
        return cls(list(joint_names), adjacency, pose)

    @classmethod
    def load(cls, path: str) -> "SkeletonGraph":
        """
        Read a graph file: ``{"joints": [...], "edges": [[a, b], ...], "rest_pose": [[x, y, z], ...]}``.
        """
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
        graph = cls.from_edges(document["joints"], document["edges"], document.get("rest_pose"))
        logger.debug(f"Loaded skeleton graph '{document.get('name', path)}' with {graph.num_joints} joints")
        return graph

    @classmethod
    def human36m(cls) -> "SkeletonGraph":
        return cls.load(DEFAULT_GRAPH_PATH)

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for nxt in np.nonzero(self.adjacency[node])[0]:
                if int(nxt) not in seen:
                    seen.add(int(nxt))
                    frontier.append(int(nxt))
        return len(seen) == self.num_joints

    def permuted(self, perm: Sequence[int]) -> "SkeletonGraph":
        """Relabel joints so that new joint i is old joint perm[i]."""
        perm = np.asarray(perm)
        pose = None if self.rest_pose is None else self.rest_pose[perm]
        return SkeletonGraph([self.joint_names[p] for p in perm],
                             self.adjacency[np.ix_(perm, perm)], pose)


def laplacian_pe(graph: SkeletonGraph, k: int) -> np.ndarray:
    """
    Laplacian eigenmap positional encoding.

    Uses the eigenvectors of I - D^-1/2 A D^-1/2 belonging to the k smallest
    nonzero eigenvalues, unit columns, each column signed so its first nonzero
    component is positive.

    Args:
        graph: Skeleton graph
        k: Encoding width, must be below the joint count

    Returns:
        J×k array
    """
    j = graph.num_joints
    if k < 1 or k >= j:
        raise GraphError(f"positional encoding width k={k} must satisfy 1 <= k < J={j}")
    degree = graph.adjacency.sum(axis=1)
    inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(np.where(degree > 0, degree, 1.0)), 0.0)
    laplacian = np.eye(j) - inv_sqrt[:, None] * graph.adjacency * inv_sqrt[None, :]
    values, vectors = np.linalg.eigh(laplacian)
    nonzero = np.nonzero(values > EIGEN_TOL)[0]
    if len(nonzero) < k:
        raise GraphError(f"graph has {len(nonzero)} nonzero Laplacian eigenvalues, {k} requested "
                         f"(disconnected graph?)")
    pe = vectors[:, nonzero[:k]]
    pe = pe / np.linalg.norm(pe, axis=0, keepdims=True)
    for c in range(k):
        lead = np.nonzero(np.abs(pe[:, c]) > EIGEN_TOL)[0][0]
        if pe[lead, c] < 0:
            pe[:, c] = -pe[:, c]
    return pe


@dataclass
class SGTConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 64
    pe_dim: int = 4
    mlp_ratio: int = 2
    gpc_alpha: float = 0.5
    gpc_tau1: float = 0.07
    gpc_tau2: float = 0.07
    stpr_beta: float = 0.5
    sgt_lambda: float = 0.5
    mask_ratio: float = 0.2

    def validate(self) -> None:
        for name in ("gpc_alpha", "stpr_beta", "sgt_lambda"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"sgt.{name} must lie in [0, 1], got {value}")
        for name in ("gpc_tau1", "gpc_tau2"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"sgt.{name} must be positive")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"sgt.mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.layers < 0:
            raise ConfigurationError("sgt.layers must be non-negative")


@dataclass
class GraphPrototypeBank:
    """One centroid per identity, rows indexed by training label."""
    prototypes: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def from_features(cls, features: np.ndarray, labels: np.ndarray, num_classes: int) -> "GraphPrototypeBank":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=num_classes)
        if np.any(counts == 0):
            raise DataError(f"identity {int(np.argmin(counts))} has no sequence for its prototype")
        sums = np.zeros((num_classes, features.shape[1]))
        np.add.at(sums, labels, features)
        return cls(sums / counts[:, None])


@dataclass
class SkeletonEncoding:
    tokens: Tensor       # B×T×(1+J)×C
    frame_feats: Tensor  # B×T×C
    seq_feat: Tensor     # B×C


def _masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean per-joint L1 error over masked positions (mask shaped like pred[..., 0])."""
    per_joint = T.l1_norm(pred - Tensor(target), axis=-1)
    count = max(int(mask.sum()), 1)
    return T.sum(per_joint * Tensor(mask.astype(np.float64))) / count


class SkeletonEncoder(Module):
    """
    Per-frame graph transformer over J joints.

    Args:
        cfg: SGT hyperparameters
        graph: Joint graph providing the Laplacian positional encoding
        rng: Initialization generator
    """

    def __init__(self, cfg: SGTConfig, graph: SkeletonGraph, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.graph = graph
        self._pe = laplacian_pe(graph, cfg.pe_dim)
        c = cfg.dim
        self.fc1 = Linear(3, c, rng)
        self.fc2 = Linear(c, c, rng)
        self.fc_pos = Linear(cfg.pe_dim, c, rng)
        self.layers = [TransformerBlock(c, cfg.heads, rng, mlp_ratio=cfg.mlp_ratio)
                       for _ in range(cfg.layers)]
        self.summary = Parameter(rng.normal(0.0, 0.02, size=c))
        # prototype-contrast projection heads
        self.gpc_f1 = Linear(c, c, rng)
        self.gpc_f2 = Linear(c, c, rng)
        # reconstruction prompts and heads
        self.structure_prompt = Parameter(rng.normal(0.0, 0.02, size=c))
        self.trajectory_prompt = Parameter(rng.normal(0.0, 0.02, size=c))
        self.trajectory_attn = MultiHeadAttention(c, cfg.heads, rng)
        self.structure_head = Linear(c, 3, rng)
        self.trajectory_head = Linear(c, 3, rng)

    @property
    def num_joints(self) -> int:
        return self.graph.num_joints

    @property
    def pe(self) -> np.ndarray:
        return self._pe

    def graph_embed(self, frames: Union[Tensor, np.ndarray], pe: Optional[np.ndarray] = None) -> Tensor:
        """h0 = FC2(ReLU(FC1(S))) + FC_pos(e) for frames shaped …×J×3."""
        coords, position = self._embed_parts(frames, pe)
        return coords + position

    def _embed_parts(self, frames: Union[Tensor, np.ndarray],
                     pe: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """(coordinate embedding, positional term broadcast to its shape)."""
        x = T.as_tensor(frames)
        pe = self._pe if pe is None else pe
        if x.shape[-2:] != (pe.shape[0], 3):
            raise DataError(f"frames {x.shape} do not match J={pe.shape[0]} joints")
        coords = self.fc2(T.relu(self.fc1(x)))
        return coords, T.broadcast_to(self.fc_pos(Tensor(pe)), coords.shape)

    def _prompted(self, joints: np.ndarray, mask: np.ndarray, prompt: Parameter) -> Tensor:
        """Graph embedding with the coordinate part of masked joints swapped for a prompt; positions stay."""
        b, t, j, _ = joints.shape
        coords, position = self._embed_parts(joints.reshape(b * t, j, 3))
        m = np.broadcast_to(mask.reshape(b * t, j, 1), coords.shape).astype(np.float64)
        return coords * Tensor(1.0 - m) + T.broadcast_to(prompt, coords.shape) * Tensor(m) + position

    def _relate(self, h: Tensor) -> Tensor:
        for layer in self.layers:
            h = layer(h)
        return h

    def encode_batch(self, joints: np.ndarray) -> SkeletonEncoding:
        """
        Encode B sequences of equal length.

        Args:
            joints: B×T×J×3 coordinates

        Returns:
            SkeletonEncoding with (1+J) tokens per frame, frame and sequence features
        """
        joints = np.asarray(joints, dtype=np.float64)
        b, t, j, _ = joints.shape
        if t == 0:
            raise DataError("empty tracklet")
        c = self.cfg.dim
        h = self._relate(self.graph_embed(joints.reshape(b * t, j, 3)))
        frame = T.mean(h, axis=1)
        summary = frame + T.broadcast_to(self.summary, frame.shape)
        tokens = T.concat([T.reshape(summary, (b * t, 1, c)), h], axis=1)
        frame_feats = T.reshape(frame, (b, t, c))
        return SkeletonEncoding(tokens=T.reshape(tokens, (b, t, 1 + j, c)),
                                frame_feats=frame_feats,
                                seq_feat=T.mean(frame_feats, axis=1))

    def encode_sequence(self, seq: SkeletonSequence) -> Tuple[Tensor, Tensor, Tensor]:
        """Encode one sequence after dropping empty frames; returns (tokens, frame_feats, seq_feat)."""
        keep = ~seq.empty_frames()
        if not np.any(keep):
            raise DataError("empty tracklet")
        enc = self.encode_batch(seq.joints[keep][None])
        return enc.tokens[0], enc.frame_feats[0], enc.seq_feat[0]

    # -- self-training losses ------------------------------------------------

    def gpc_terms(self, seq_feats: Tensor, frame_feats: Tensor, labels: np.ndarray,
                  bank: GraphPrototypeBank) -> Tuple[Tensor, Tensor]:
        """Sequence-level and frame-level prototype contrast terms."""
        labels = np.asarray(labels, dtype=np.int64)
        k = bank.num_classes
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"label outside prototype bank of {k} identities")
        n, t, c = frame_feats.shape
        protos = Tensor(bank.prototypes)

        seq_logits = T.scale(T.matmul(seq_feats, T.transpose(protos)), 1.0 / self.cfg.gpc_tau1)
        l_seq = -T.mean(T.log_softmax(seq_logits)[np.arange(n), labels])

        frames = self.gpc_f1(T.reshape(frame_feats, (n * t, c)))
        ske_logits = T.scale(T.matmul(frames, T.transpose(self.gpc_f2(protos))), 1.0 / self.cfg.gpc_tau2)
        l_ske = -T.mean(T.log_softmax(ske_logits)[np.arange(n * t), np.repeat(labels, t)])
        return l_seq, l_ske

    def gpc_loss(self, seq_feats: Tensor, frame_feats: Tensor, labels: np.ndarray,
                 bank: GraphPrototypeBank) -> Tensor:
        l_seq, l_ske = self.gpc_terms(seq_feats, frame_feats, labels, bank)
        alpha = self.cfg.gpc_alpha
        return alpha * l_seq + (1.0 - alpha) * l_ske

    def structure_reconstruction(self, joints: np.ndarray, mask: np.ndarray) -> Tensor:
        """Predict coordinates with masked joints (B×T×J mask) replaced by the structure prompt."""
        b, t, j, _ = joints.shape
        pred = self.structure_head(self._relate(self._prompted(joints, mask, self.structure_prompt)))
        return T.reshape(pred, (b, t, j, 3))

    def trajectory_reconstruction(self, joints: np.ndarray, mask: np.ndarray) -> Tensor:
        """
        Predict coordinates with masked (frame, joint) slots replaced by the
        trajectory prompt; each joint's trajectory is then mixed over time.
        Returns B×J×T×3.
        """
        b, t, j, _ = joints.shape
        c = self.cfg.dim
        h = self._relate(self._prompted(joints, mask, self.trajectory_prompt))
        h = T.transpose(T.reshape(h, (b, t, j, c)), (0, 2, 1, 3))
        h = T.reshape(h, (b * j, t, c))
        h = h + self.trajectory_attn(h)
        return T.reshape(self.trajectory_head(h), (b, j, t, 3))

    def _draw_masks(self, shape_btj: Tuple[int, int, int], rng: np.random.Generator):
        b, t, j = shape_btj
        ratio = self.cfg.mask_ratio
        n_joint = min(max(1, int(round(ratio * j))), j)
        order = rng.random((b, t, j)).argsort(axis=-1)
        structure = np.zeros((b, t, j), dtype=bool)
        np.put_along_axis(structure, order[..., :n_joint], True, axis=-1)

        n_frame = min(max(1, int(round(ratio * t))), max(t - 1, 1))
        order = rng.random((b, j, t)).argsort(axis=-1)
        trajectory = np.zeros((b, j, t), dtype=bool)
        np.put_along_axis(trajectory, order[..., :n_frame], True, axis=-1)
        return structure, trajectory

    def stpr_loss(self, joints: np.ndarray, rng: np.random.Generator) -> Tensor:
        """
        Masked structure/trajectory reconstruction, beta-mixed L1 error.

        Args:
            joints: B×T×J×3 ground-truth coordinates
            rng: Stream the masks are drawn from

        Returns:
            Scalar loss
        """
        ratio = self.cfg.mask_ratio
        if not 0.0 < ratio < 1.0:
            raise ConfigurationError(f"mask ratio must lie in (0, 1), got {ratio}")
        joints = np.asarray(joints, dtype=np.float64)
        b, t, j, _ = joints.shape
        beta = self.cfg.stpr_beta
        structure_mask, trajectory_mask = self._draw_masks((b, t, j), rng)

        loss = beta * _masked_l1(self.structure_reconstruction(joints, structure_mask),
                                 joints, structure_mask)
        if beta < 1.0:
            if t < 2:
                raise DataError("trajectory reconstruction needs at least 2 frames")
            pred = self.trajectory_reconstruction(joints, np.transpose(trajectory_mask, (0, 2, 1)))
            loss = loss + (1.0 - beta) * _masked_l1(pred, np.transpose(joints, (0, 2, 1, 3)),
                                                    trajectory_mask)
        return loss


def gpc_loss(encoder: SkeletonEncoder, seq_feats: Tensor, frame_feats: Tensor,
             labels: np.ndarray, bank: GraphPrototypeBank) -> Tensor:
    return encoder.gpc_loss(seq_feats, frame_feats, labels, bank)


def sgt_objective(gpc, stpr, lam: float):
    """lambda * L_GPC + (1 - lambda) * L_STPR."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"sgt lambda must lie in [0, 1], got {lam}")
    return lam * gpc + (1.0 - lam) * stpr
