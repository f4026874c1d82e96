"""
Module ablation grid.

Each variant switches Stage-2 components on top of the previous one. Stage 1
is shared between variants of one seed, so the grid isolates the finetuning
modules. Results are aggregated across seeds with pandas and reported as a
table plus a JSON document.
"""

import copy
import json
import logging
import os
from typing import Dict, List, Optional, Sequence

import pandas as pd
import tabulate

from src.config import ExperimentConfig, merge
from src.errors import ConfigurationError
from src.experiment import build_model, evaluate_retrieval, load_graph, snapshot
from src.run_log import RunLog
from src.synthetic import generate_dataset
from src.trainer import train_stage1, train_stage2

logger = logging.getLogger(__name__)

BASELINE = "baseline"
FULL = "full"

# stage2 toggles per variant, ordered from plain identity losses to the full model
ABLATION_GRID: Dict[str, Dict[str, bool]] = {
    BASELINE: {"use_pfu": False, "use_pfu_fusion": False, "use_pfu_update": False,
               "use_sgtm": False, "use_atd": False},
    "proto-visual": {"use_pfu": True, "use_pfu_fusion": False, "use_pfu_update": False,
                     "use_sgtm": False, "use_atd": False},
    "fusion": {"use_pfu": True, "use_pfu_fusion": True, "use_pfu_update": False,
               "use_sgtm": False, "use_atd": False},
    "fusion+update": {"use_pfu": True, "use_pfu_fusion": True, "use_pfu_update": True,
                      "use_sgtm": False, "use_atd": False},
    "sgtm-no-atd": {"use_pfu": True, "use_pfu_fusion": True, "use_pfu_update": True,
                    "use_sgtm": True, "use_atd": False},
    FULL: {"use_pfu": True, "use_pfu_fusion": True, "use_pfu_update": True,
           "use_sgtm": True, "use_atd": True},
}


def variant_config(base: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in ABLATION_GRID:
        raise ConfigurationError(f"unknown ablation variant '{variant}', expected one of {list(ABLATION_GRID)}")
    cfg = merge(base, {"stage2": ABLATION_GRID[variant]})
    return cfg.validate()


def run_ablation(base: ExperimentConfig, seeds: Sequence[int],
                 variants: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Train every variant for every seed.

    Returns:
        One row per (variant, seed) with mAP and rank-1
    """
    variants = list(variants or ABLATION_GRID)
    for name in variants:
        variant_config(base, name)
    rows: List[Dict] = []
    graph = load_graph(base)
    for seed in seeds:
        seeded = copy.deepcopy(base).with_seed(seed)
        splits = generate_dataset(seeded.data, graph)
        model = build_model(seeded, splits, graph)
        train_stage1(model, splits, seeded, RunLog())
        pretrained = snapshot(model)
        for name in variants:
            cfg = variant_config(seeded, name)
            model.load_checkpoint_state(pretrained)
            train_stage2(model, splits, cfg, RunLog())
            result = evaluate_retrieval(model, splits, cfg)
            logger.info(f"ablation {name} seed={seed}: mAP={result.mAP:.4f} rank1={result.rank(1):.4f}")
            rows.append({"variant": name, "seed": seed, "mAP": result.mAP, "rank1": result.rank(1)})
    return pd.DataFrame(rows, columns=["variant", "seed", "mAP", "rank1"])


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and spread per variant, in grid order."""
    summary = frame.groupby("variant", sort=False).agg(
        mAP=("mAP", "mean"), mAP_std=("mAP", "std"), rank1=("rank1", "mean"), seeds=("seed", "count"))
    order = [v for v in ABLATION_GRID if v in summary.index]
    return summary.loc[order].fillna(0.0)


def format_report(summary: pd.DataFrame) -> str:
    rows = [[name, f"{row.mAP:.4f}", f"{row.mAP_std:.4f}", f"{row.rank1:.4f}", int(row.seeds)]
            for name, row in summary.iterrows()]
    return tabulate.tabulate(rows, headers=["Variant", "mAP", "mAP std", "Rank-1", "Seeds"], tablefmt="grid")


def write_ablation(path: str, frame: pd.DataFrame, summary: pd.DataFrame) -> Dict:
    document = {
        "runs": frame.to_dict(orient="records"),
        "summary": {name: {k: float(v) for k, v in row.items()} for name, row in summary.iterrows()},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
    logger.info(f"Wrote ablation report to {path}")
    return document
