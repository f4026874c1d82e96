"""
Training loops: SGT self-training, Stage-1 alignment, Stage-2 finetuning, and
feature extraction for retrieval.

Frozen-side features are computed once per stage under ``no_grad`` with a
deterministic frame selection and reused by every step.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from src import rng as rng_streams
from src import tensor as T
from src.align import AlignedBatch, contrastive_losses
from src.config import SKELETON, VIDEO, ExperimentConfig
from src.errors import ConfigurationError, DataError, TrainingError
from src.evaluation import FeatureSet
from src.losses import TripletConfig, batch_hard_triplet, ce_label_smoothing
from src.model import ReIDModel
from src.optim import Adam
from src.pfu import ModalityPrototypes
from src.run_log import RunLog
from src.sampler import collate, pk_epoch, sequential_batches
from src.skeleton_encoder import GraphPrototypeBank, sgt_objective
from src.synthetic import DatasetSplits
from src.tensor import Tensor, no_grad
from src.tracklet import Tracklet
from src.visual_encoder import sequence_feature

logger = logging.getLogger(__name__)

FEATURE_CHUNK = 32


def _check_finite(loss: Tensor, stage: str, epoch: int, step: int, terms: Dict[str, Tensor]) -> None:
    if not np.isfinite(loss.item()):
        detail = ", ".join(f"{k}={v.item():.6g}" for k, v in terms.items())
        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch} step {step} ({detail})")


def _trainable(model: ReIDModel, prefixes: Sequence[str]):
    return {path: p for path, p in model.named_parameters()
            if p.requires_grad and path.split(".", 1)[0] in prefixes}


def _freeze_all_but(model: ReIDModel, prefixes: Sequence[str]) -> None:
    model.freeze()
    for name in prefixes:
        getattr(model, name).unfreeze()


def _chunks(n: int) -> List[np.ndarray]:
    return sequential_batches(n, FEATURE_CHUNK)


# -- frozen feature caches ------------------------------------------------------------

def visual_tokens(model: ReIDModel, tracklets: Sequence[Tracklet], frames: int) -> np.ndarray:
    """N×T×(1+N_p)×C visual tokens, deterministic frames, no graph."""
    out = []
    with no_grad():
        for idx in _chunks(len(tracklets)):
            images, _ = collate([tracklets[i] for i in idx], frames)
            out.append(model.visual.encode_batch(images).data)
    return np.concatenate(out)


def skeleton_tokens(model: ReIDModel, tracklets: Sequence[Tracklet], frames: int) -> np.ndarray:
    """N×T×(1+J)×C skeleton tokens, deterministic frames, no graph."""
    out = []
    with no_grad():
        for idx in _chunks(len(tracklets)):
            _, joints = collate([tracklets[i] for i in idx], frames)
            out.append(model.skeleton.encode_batch(joints).tokens.data)
    return np.concatenate(out)


def skeleton_features(model: ReIDModel, tracklets: Sequence[Tracklet], frames: int) -> np.ndarray:
    """N×C sequence features of the skeleton encoder, no graph."""
    with no_grad():
        return np.concatenate([
            model.skeleton.encode_batch(collate([tracklets[i] for i in idx], frames)[1]).seq_feat.data
            for idx in _chunks(len(tracklets))])


def _pooled(tokens: np.ndarray) -> np.ndarray:
    return tokens.mean(axis=(1, 2))


# -- SGT self-training ----------------------------------------------------------------

def train_sgt(model: ReIDModel, splits: DatasetSplits, cfg: ExperimentConfig,
              log: Optional[RunLog] = None) -> RunLog:
    """
    Self-train the skeleton encoder with lambda·L_GPC + (1-lambda)·L_STPR.
    The prototype bank is recomputed at every epoch boundary.
    """
    log = log or RunLog()
    s1 = cfg.stage1
    enc = model.skeleton
    _freeze_all_but(model, ("skeleton",))
    optimizer = Adam(_trainable(model, ("skeleton",)))
    tracklets = splits.train
    labels = splits.labels(tracklets)
    step = 0
    for epoch in range(s1.sgt_epochs):
        feats = skeleton_features(model, tracklets, s1.frames)
        bank = GraphPrototypeBank.from_features(feats, labels, splits.num_classes)
        lr = s1.schedule.lr_at(epoch)
        totals = {"gpc": 0.0, "stpr": 0.0, "loss": 0.0}
        batches = sequential_batches(len(tracklets), s1.batch_size, rng_streams.stream(s1.seed, "sgt-batches", epoch))
        for batch_idx in batches:
            _, joints = collate([tracklets[i] for i in batch_idx], s1.frames)
            out = enc.encode_batch(joints)
            gpc = enc.gpc_loss(out.seq_feat, out.frame_feats, labels[batch_idx], bank)
            stpr = enc.stpr_loss(joints, rng_streams.stream(s1.seed, "stpr", step))
            loss = sgt_objective(gpc, stpr, cfg.sgt.sgt_lambda)
            _check_finite(loss, "sgt", epoch, step, {"gpc": gpc, "stpr": stpr})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            for key, value in (("gpc", gpc), ("stpr", stpr), ("loss", loss)):
                totals[key] += value.item() / len(batches)
            step += 1
        log.log_epoch("sgt", epoch, lr, totals)
    model.unfreeze()
    return log


# -- Stage 1 ------------------------------------------------------------------------

def stage1_prefixes(mode: str):
    return ("skeleton", "heads") if mode == VIDEO else ("visual", "heads")


def _stage1_features(model: ReIDModel, tracklets: Sequence[Tracklet], frames: int, mode: str,
                     frozen_cache: np.ndarray):
    """(visual, skeleton) pooled features with the trainable side carrying a graph."""
    images, joints = collate(tracklets, frames)
    if mode == VIDEO:
        return Tensor(frozen_cache), model.skeleton.encode_batch(joints).seq_feat
    return sequence_feature(model.visual.encode_batch(images)), Tensor(frozen_cache)


def stage1_loss(model: ReIDModel, splits: DatasetSplits, cfg: ExperimentConfig) -> float:
    """L_v2s + L_s2v over the whole training split in one batch, without a graph."""
    s1 = cfg.stage1
    with no_grad():
        v = _pooled(visual_tokens(model, splits.train, s1.frames))
        s = skeleton_features(model, splits.train, s1.frames)
        l_v2s, l_s2v = contrastive_losses(AlignedBatch(Tensor(v), Tensor(s), splits.labels(splits.train)),
                                          model.heads)
    return l_v2s.item() + l_s2v.item()


def train_stage1(model: ReIDModel, splits: DatasetSplits, cfg: ExperimentConfig,
                 log: Optional[RunLog] = None) -> RunLog:
    """
    Contrastive alignment. Video mode trains the skeleton encoder and heads
    against the frozen visual encoder; skeleton mode swaps the roles.
    """
    log = log or RunLog()
    s1 = cfg.stage1
    s1.validate()
    if s1.sgt_epochs:
        train_sgt(model, splits, cfg, log)
    prefixes = stage1_prefixes(s1.mode)
    tracklets = splits.train
    labels = splits.labels(tracklets)
    if s1.mode == VIDEO:
        frozen = _pooled(visual_tokens(model, tracklets, s1.frames))
    else:
        frozen = skeleton_features(model, tracklets, s1.frames)
    _freeze_all_but(model, prefixes)
    optimizer = Adam(_trainable(model, prefixes))
    logger.info(f"Stage 1 ({s1.mode}): training {sorted(prefixes)} on {len(tracklets)} tracklets")

    step = 0
    for epoch in range(s1.epochs):
        lr = s1.schedule.lr_at(epoch)
        totals = {"v2s": 0.0, "s2v": 0.0, "loss": 0.0}
        batches = sequential_batches(len(tracklets), s1.batch_size,
                                     rng_streams.stream(s1.seed, "stage1-batches", epoch))
        for batch_idx in batches:
            v, s = _stage1_features(model, [tracklets[i] for i in batch_idx], s1.frames, s1.mode,
                                    frozen[batch_idx])
            l_v2s, l_s2v = contrastive_losses(AlignedBatch(v, s, labels[batch_idx]), model.heads)
            loss = l_v2s + l_s2v
            _check_finite(loss, "stage1", epoch, step, {"v2s": l_v2s, "s2v": l_s2v})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            for key, value in (("v2s", l_v2s), ("s2v", l_s2v), ("loss", loss)):
                totals[key] += value.item() / len(batches)
            step += 1
        log.log_epoch("stage1", epoch, lr, totals)
    model.unfreeze()
    return log


# -- Stage 2 ------------------------------------------------------------------------

def stage2_prefixes(cfg: ExperimentConfig):
    s2 = cfg.stage2
    prefixes = ["visual" if s2.mode == VIDEO else "skeleton", "classifier"]
    if s2.use_pfu:
        prefixes.append("pfu")
    if s2.use_sgtm and s2.mode == VIDEO:
        prefixes.append("sgtm")
    return tuple(prefixes)


def pool_prototypes(model: ReIDModel, splits: DatasetSplits, frames: int) -> ModalityPrototypes:
    """Intra-identity prototypes from the encoders as they stand at Stage-2 start."""
    tracklets = splits.train
    v = _pooled(visual_tokens(model, tracklets, frames))
    s = skeleton_features(model, tracklets, frames)
    protos = ModalityPrototypes.pool(s, v, splits.labels(tracklets), splits.num_classes, splits.label_map)
    model.pfu.set_prototypes(protos)
    return protos


@dataclass
class Stage2Batch:
    features: Tensor            # B×C pooled feature of the trainable encoder
    labels: np.ndarray
    visual_tokens: Tensor       # B×T×(1+N_p)×C
    skeleton_tokens: Tensor     # B×T×(1+J)×C


def stage2_batch(model: ReIDModel, tracklets: Sequence[Tracklet], labels: np.ndarray, cfg: ExperimentConfig,
                 frozen_tokens: np.ndarray) -> Stage2Batch:
    images, joints = collate(tracklets, cfg.stage2.frames)
    if cfg.stage2.mode == VIDEO:
        v_tokens = model.visual.encode_batch(images)
        s_tokens = Tensor(frozen_tokens)
        features = sequence_feature(v_tokens)
    else:
        v_tokens = Tensor(frozen_tokens)
        enc = model.skeleton.encode_batch(joints)
        s_tokens, features = enc.tokens, enc.seq_feat
    return Stage2Batch(features, labels, v_tokens, s_tokens)


def fused_tokens(batch: Stage2Batch) -> Tensor:
    """Frame-mean visual tokens followed by frame-mean skeleton tokens: B×(L_vis+L_ske)×C."""
    return T.concat([T.mean(batch.visual_tokens, axis=1), T.mean(batch.skeleton_tokens, axis=1)], axis=1)


def stage2_terms(model: ReIDModel, batch: Stage2Batch, cfg: ExperimentConfig) -> Dict[str, Tensor]:
    s2 = cfg.stage2
    terms = {
        "ce": ce_label_smoothing(batch.features, batch.labels, model.classifier),
        "triplet": batch_hard_triplet(batch.features, batch.labels, TripletConfig(margin=s2.margin)),
    }
    if s2.use_pfu:
        needs_tokens = s2.use_pfu_update
        terms["proto"] = model.pfu.loss(batch.features, batch.labels,
                                       fused_tokens(batch) if needs_tokens else None,
                                       use_fusion=s2.use_pfu_fusion, use_update=s2.use_pfu_update)
    if s2.use_sgtm:
        if s2.mode != VIDEO:
            raise ConfigurationError("the temporal model needs visual tokens (video mode)")
        terms["frame"], _ = model.sgtm.training_loss(batch.visual_tokens, batch.skeleton_tokens, batch.labels,
                                                     use_atd=s2.use_atd)
    return terms


def stage2_total(terms: Dict[str, Tensor], lambda1: float, lambda2: float) -> Tensor:
    """L_CE + L_Triplet + lambda1·L_proto + lambda2·L_Frame over the terms present."""
    total = terms["ce"] + terms["triplet"]
    if "proto" in terms:
        total = total + lambda1 * terms["proto"]
    if "frame" in terms:
        total = total + lambda2 * terms["frame"]
    return total


def train_stage2(model: ReIDModel, splits: DatasetSplits, cfg: ExperimentConfig,
                 log: Optional[RunLog] = None) -> RunLog:
    """
    Identity finetuning with PK batches.

    Video mode updates the visual encoder, PFU, temporal model and classifier
    while the skeleton encoder stays frozen. Skeleton mode updates the
    skeleton encoder, PFU and classifier against a frozen visual encoder.
    """
    log = log or RunLog()
    s2 = cfg.stage2
    s2.validate()
    tracklets = splits.train
    labels = splits.labels(tracklets)
    if len(tracklets) == 0:
        raise DataError("no training tracklets")
    if s2.use_pfu:
        pool_prototypes(model, splits, s2.frames)
    if s2.mode == VIDEO:
        frozen = skeleton_tokens(model, tracklets, s2.frames)
    else:
        frozen = visual_tokens(model, tracklets, s2.frames)

    prefixes = stage2_prefixes(cfg)
    _freeze_all_but(model, prefixes)
    optimizer = Adam(_trainable(model, prefixes))
    logger.info(f"Stage 2 ({s2.mode}): training {sorted(prefixes)}")

    pids = [t.pid for t in tracklets]
    step = 0
    for epoch in range(s2.epochs):
        lr = s2.schedule.lr_at(epoch)
        batches = pk_epoch(pids, s2.p, s2.k, s2.seed, epoch)
        totals: Dict[str, float] = {}
        for batch_idx in batches:
            batch = stage2_batch(model, [tracklets[i] for i in batch_idx], labels[batch_idx], cfg,
                                 frozen[batch_idx])
            terms = stage2_terms(model, batch, cfg)
            loss = stage2_total(terms, s2.lambda1, s2.lambda2)
            _check_finite(loss, "stage2", epoch, step, terms)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            for key, value in list(terms.items()) + [("loss", loss)]:
                totals[key] = totals.get(key, 0.0) + value.item() / len(batches)
            step += 1
        log.log_epoch("stage2", epoch, lr, totals)
    model.unfreeze()
    return log


# -- features -----------------------------------------------------------------------

FEATURE_KINDS = ("visual", "skeleton", "visual-proj", "skeleton-proj")


def extract_features(model: ReIDModel, tracklets: Sequence[Tracklet], cfg: ExperimentConfig,
                     kind: str = "visual", use_sgtm: Optional[bool] = None) -> FeatureSet:
    """
    Retrieval features for a list of tracklets.

    Args:
        kind: "visual" (SGTM test-mode features when the temporal model is in
            use, else pooled tokens), "skeleton", or the projected
            "visual-proj"/"skeleton-proj" used for cross-modal retrieval
        use_sgtm: Overrides ``cfg.stage2.use_sgtm`` for visual features
    """
    if kind not in FEATURE_KINDS:
        raise ConfigurationError(f"unknown feature kind '{kind}', expected one of {FEATURE_KINDS}")
    use_sgtm = (cfg.stage2.use_sgtm and cfg.stage2.mode == VIDEO) if use_sgtm is None else use_sgtm
    frames = cfg.eval.frames
    out = []
    with no_grad():
        for idx in _chunks(len(tracklets)):
            images, joints = collate([tracklets[i] for i in idx], frames)
            if kind.startswith("visual"):
                tokens = model.visual.encode_batch(images)
                if kind == "visual" and use_sgtm:
                    feats = model.sgtm.features(tokens)
                else:
                    feats = sequence_feature(tokens)
                if kind == "visual-proj":
                    feats = model.heads.proj_v(feats)
            else:
                feats = model.skeleton.encode_batch(joints).seq_feat
                if kind == "skeleton-proj":
                    feats = model.heads.proj_s(feats)
            out.append(feats.data)
    return FeatureSet(np.concatenate(out) if out else np.zeros((0, cfg.model.dim)),
                      [t.pid for t in tracklets], [t.camid for t in tracklets],
                      [t.tracklet_id for t in tracklets])


def retrieval_kind(cfg: ExperimentConfig) -> str:
    """Feature kind used for same-modality retrieval after Stage 2."""
    return "skeleton" if cfg.stage2.mode == SKELETON else "visual"
