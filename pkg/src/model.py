"""The full re-identification model and its checkpoint container."""

import logging
from typing import Dict, Optional

import numpy as np

from src import rng as rng_streams
from src.align import AlignmentHeads
from src.checkpoint import load_container, save_container
from src.config import ExperimentConfig
from src.errors import IngestError
from src.losses import CEConfig, IdentityClassifier
from src.nn import Module
from src.pfu import ModalityPrototypes, PrototypeFusionUpdater
from src.sgtm import SkeletonGuidedTemporalModel
from src.skeleton_encoder import SkeletonEncoder, SkeletonGraph
from src.visual_encoder import VisualEncoder

logger = logging.getLogger(__name__)

PROTOTYPE_KEYS = ("pfu.prototypes.skeleton", "pfu.prototypes.visual",
                  "pfu.prototypes.pids", "pfu.prototypes.labels")


class ReIDModel(Module):
    """
    Both encoders, the Stage-1 alignment heads and the Stage-2 modules.

    Args:
        cfg: Experiment configuration
        num_classes: Training identities K
        graph: Skeleton graph, defaults to ``cfg.model.graph_path`` or Human3.6M
    """

    def __init__(self, cfg: ExperimentConfig, num_classes: int, graph: Optional[SkeletonGraph] = None):
        graph = graph or (SkeletonGraph.load(cfg.model.graph_path) if cfg.model.graph_path
                          else SkeletonGraph.human36m())
        seed = cfg.seed
        c = cfg.model.dim
        self.num_classes = num_classes
        self.visual = VisualEncoder(cfg.model.visual_config(), rng_streams.stream(seed, "init", 0))
        self.skeleton = SkeletonEncoder(cfg.sgt, graph, rng_streams.stream(seed, "init", 1))
        self.heads = AlignmentHeads(c, cfg.sgt.dim, rng_streams.stream(seed, "init", 2),
                                    shared_dim=cfg.model.shared_dim, tau=cfg.stage1.tau)
        expected = self.visual.num_tokens + 1 + graph.num_joints
        self.pfu = PrototypeFusionUpdater(c, cfg.model.heads, rng_streams.stream(seed, "init", 3),
                                          expected_tokens=expected)
        self.sgtm = SkeletonGuidedTemporalModel(c, cfg.model.heads, num_classes,
                                                rng_streams.stream(seed, "init", 4),
                                                mlp_ratio=cfg.model.mlp_ratio)
        self.classifier = IdentityClassifier(c, CEConfig(num_classes, cfg.stage2.smoothing),
                                             rng_streams.stream(seed, "init", 5))

    def checkpoint_state(self) -> Dict[str, np.ndarray]:
        state = self.state_dict()
        if self.pfu.has_prototypes:
            bank = self.pfu.prototypes
            pids = sorted(bank.identity_map)
            state["pfu.prototypes.skeleton"] = bank.skeleton
            state["pfu.prototypes.visual"] = bank.visual
            state["pfu.prototypes.pids"] = np.array(pids, dtype=np.float64)
            state["pfu.prototypes.labels"] = np.array([bank.identity_map[p] for p in pids], dtype=np.float64)
        return state

    def load_checkpoint_state(self, state: Dict[str, np.ndarray]) -> None:
        params = {k: v for k, v in state.items() if k not in PROTOTYPE_KEYS}
        self.load_state_dict(params, strict=True)
        if "pfu.prototypes.skeleton" in state:
            identity_map = {int(p): int(label) for p, label in
                            zip(state["pfu.prototypes.pids"], state["pfu.prototypes.labels"])}
            self.pfu.set_prototypes(ModalityPrototypes(state["pfu.prototypes.skeleton"],
                                                       state["pfu.prototypes.visual"], identity_map))


def save_checkpoint(model: ReIDModel, path: str) -> None:
    save_container(path, model.checkpoint_state())
    logger.info(f"Saved checkpoint with {model.num_parameters()} parameters to {path}")


def load_checkpoint(model: ReIDModel, path: str) -> ReIDModel:
    state = load_container(path)
    try:
        model.load_checkpoint_state(state)
    except Exception as e:
        raise IngestError(f"{path}: checkpoint does not match the model: {e}") from e
    logger.info(f"Loaded checkpoint {path}")
    return model
