"""Retrieval evaluation: Euclidean ranking, CMC and mAP with same-camera exclusion."""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.checkpoint import load_container, save_container
from src.errors import EvaluationError, IngestError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10)


def pairwise_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Nq×Ng Euclidean distances from explicit differences (identical rows give exactly 0)."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeError("pairwise_distances", query.shape, gallery.shape)
    diff = query[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def l2_normalize(features: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.maximum(norms, eps)


@dataclass
class QueryRanking:
    query: int
    order: np.ndarray     # gallery indices after exclusion, best first
    matches: np.ndarray   # relevance flag per entry of ``order``
    ap: float

    def first_hit(self) -> int:
        """1-based rank of the first relevant entry."""
        return int(np.argmax(self.matches)) + 1


@dataclass
class RankingResult:
    mAP: float
    cmc: np.ndarray
    queries: List[QueryRanking] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_report(self, ranks: Sequence[int] = DEFAULT_RANKS, per_query: bool = False) -> Dict:
        report = {
            "mAP": self.mAP,
            "cmc": {str(k): self.rank(k) for k in ranks},
            "num_queries": len(self.queries),
            "skipped_queries": list(self.skipped),
        }
        if per_query:
            report["per_query_ap"] = {str(q.query): q.ap for q in self.queries}
        return report


def canonical_order(distances: np.ndarray) -> np.ndarray:
    """Ascending distance, ties broken by ascending gallery index."""
    return np.lexsort((np.arange(len(distances)), distances))


def average_precision(matches: np.ndarray) -> float:
    hits = np.nonzero(matches)[0]
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.mean())


def evaluate(distances: np.ndarray, query_pids, query_camids, gallery_pids, gallery_camids,
             exclude_same_camera: bool = True) -> RankingResult:
    """
    Rank the gallery for every query and compute CMC and mAP.

    Gallery entries sharing both pid and camid with the query are dropped when
    ``exclude_same_camera`` is set. Queries left without a relevant entry are
    skipped with a warning.

    Args:
        distances: Nq×Ng query-gallery distances
        query_pids, query_camids: Nq labels
        gallery_pids, gallery_camids: Ng labels
        exclude_same_camera: Apply the same-id-same-camera exclusion

    Returns:
        RankingResult with CMC over ranks 1..Ng
    """
    distances = np.asarray(distances, dtype=np.float64)
    q_pids, q_cams = np.asarray(query_pids), np.asarray(query_camids)
    g_pids, g_cams = np.asarray(gallery_pids), np.asarray(gallery_camids)
    num_q, num_g = distances.shape
    if num_g == 0:
        raise EvaluationError("empty gallery")
    if len(q_pids) != num_q or len(g_pids) != num_g:
        raise ShapeError("evaluate", distances.shape, (len(q_pids), len(g_pids)))

    cmc_sum = np.zeros(num_g)
    queries, skipped = [], []
    for q in range(num_q):
        order = canonical_order(distances[q])
        if exclude_same_camera:
            order = order[~((g_pids[order] == q_pids[q]) & (g_cams[order] == q_cams[q]))]
        matches = g_pids[order] == q_pids[q]
        if not matches.any():
            skipped.append(q)
            continue
        hit = np.zeros(num_g)
        hit[int(np.argmax(matches)):] = 1.0
        cmc_sum += hit
        queries.append(QueryRanking(q, order, matches, average_precision(matches)))

    if skipped:
        logger.warning(f"{len(skipped)} of {num_q} queries have no valid gallery match and were skipped")
    if not queries:
        raise EvaluationError("no query has a valid gallery match")
    result = RankingResult(mAP=float(np.mean([r.ap for r in queries])),
                           cmc=cmc_sum / len(queries), queries=queries, skipped=skipped)
    logger.info(f"Evaluated {len(queries)} queries: mAP={result.mAP:.4f} rank1={result.rank(1):.4f}")
    return result


def evaluate_features(query_feats: np.ndarray, query_pids, query_camids, gallery_feats: np.ndarray,
                      gallery_pids, gallery_camids, exclude_same_camera: bool = True,
                      normalize: bool = False) -> RankingResult:
    if normalize:
        query_feats, gallery_feats = l2_normalize(query_feats), l2_normalize(gallery_feats)
    return evaluate(pairwise_distances(query_feats, gallery_feats), query_pids, query_camids,
                    gallery_pids, gallery_camids, exclude_same_camera)


def write_report(path: str, result: RankingResult, per_query: bool = False,
                 extra: Optional[Dict] = None) -> Dict:
    report = result.to_report(per_query=per_query)
    if extra:
        report.update(extra)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    return report


# -- feature files -----------------------------------------------------------------

@dataclass
class FeatureSet:
    features: np.ndarray
    pids: np.ndarray
    camids: np.ndarray
    tracklet_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pids = np.asarray(self.pids, dtype=np.int64)
        self.camids = np.asarray(self.camids, dtype=np.int64)
        if not (len(self.features) == len(self.pids) == len(self.camids)):
            raise ShapeError("feature_set", self.features.shape, self.pids.shape, self.camids.shape)


def save_features(path: str, features: FeatureSet) -> Tuple[str, str]:
    """Container with a ``features`` array plus a JSON sidecar of ids and cameras."""
    save_container(path, {"features": features.features})
    sidecar = path + ".json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({"pids": features.pids.tolist(), "camids": features.camids.tolist(),
                   "tracklet_ids": list(features.tracklet_ids)}, f, indent=2)
    return path, sidecar


def load_features(path: str) -> FeatureSet:
    sidecar = path + ".json"
    if not os.path.exists(sidecar):
        raise IngestError(f"feature sidecar not found: {sidecar}")
    arrays = load_container(path)
    if "features" not in arrays:
        raise IngestError(f"{path}: no 'features' entry")
    with open(sidecar, "r", encoding="utf-8") as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise IngestError(f"{sidecar}: malformed JSON at offset {e.pos}: {e.msg}") from None
    return FeatureSet(arrays["features"], meta["pids"], meta["camids"], meta.get("tracklet_ids", []))
