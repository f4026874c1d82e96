"""
Append-only JSON-lines log of training epochs.

Each record is one line; replay reads the lines back in order, and
``frame`` exposes them as a pandas DataFrame for quick inspection.
"""

import json
import logging
import os
from typing import Any, Dict, Iterator, List, Optional

import pandas as pd

from src.errors import IngestError

logger = logging.getLogger(__name__)


class RunLog:
    """
    Handles appending and replaying epoch records.

    Args:
        path: JSONL file; parent directories are created. ``None`` keeps records in memory only.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[Dict[str, Any]] = []
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)

    def append(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def log_epoch(self, stage: str, epoch: int, lr: float, losses: Dict[str, float], **extra) -> Dict[str, Any]:
        record = {"stage": stage, "epoch": epoch, "lr": lr, **{k: float(v) for k, v in losses.items()}, **extra}
        self.append(record)
        terms = " ".join(f"{k}={v:.4f}" for k, v in losses.items())
        logger.info(f"[{stage}] epoch {epoch} lr={lr!r} {terms}")
        return record

    @staticmethod
    def replay(path: str) -> Iterator[Dict[str, Any]]:
        """Yield the records of a log file in write order."""
        if not os.path.exists(path):
            raise IngestError(f"run log not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    raise IngestError(f"{path}:{lineno}: malformed JSON at offset {e.pos}: {e.msg}") from None

    @classmethod
    def frame(cls, path: str) -> pd.DataFrame:
        return pd.DataFrame(list(cls.replay(path)))
