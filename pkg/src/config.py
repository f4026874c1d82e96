"""
Experiment configuration.

Defaults carry the full-scale training values; ``configs/desk.json`` holds the
overrides for the synthetic desk experiment. Values are layered as
defaults < config file < ``--set`` overrides < ``--seed``.
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional, Tuple

from dotenv import load_dotenv

from src.errors import ConfigurationError
from src.optim import LRSchedule
from src.skeleton_encoder import SGTConfig
from src.synthetic import SyntheticConfig
from src.visual_encoder import VisualEncoderConfig

logger = logging.getLogger(__name__)

VIDEO = "video"
SKELETON = "skeleton"
MODES = (VIDEO, SKELETON)

DEFAULT_OUTPUT_DIR = "runs"


@dataclass
class ModelConfig:
    image_height: int = 32
    image_width: int = 16
    patch_height: int = 8
    patch_width: int = 8
    depth: int = 2
    heads: int = 4
    dim: int = 64
    mlp_ratio: int = 2
    shared_dim: Optional[int] = None
    # JSON skeleton graph; None selects the bundled Human3.6M graph
    graph_path: Optional[str] = None

    def visual_config(self) -> VisualEncoderConfig:
        return VisualEncoderConfig(image_height=self.image_height, image_width=self.image_width,
                                   patch_height=self.patch_height, patch_width=self.patch_width,
                                   depth=self.depth, heads=self.heads, dim=self.dim,
                                   mlp_ratio=self.mlp_ratio)


@dataclass
class Stage1Config:
    epochs: int = 20
    batch_size: int = 16
    tau: float = 0.07
    frames: int = 8
    mode: str = VIDEO
    # SGT self-training epochs run before alignment (0 keeps the random skeleton encoder)
    sgt_epochs: int = 0
    seed: int = 0
    schedule: LRSchedule = field(default_factory=LRSchedule)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"stage1.mode must be one of {MODES}, got '{self.mode}'")
        if self.epochs < 0 or self.sgt_epochs < 0 or self.batch_size < 1 or self.frames < 1:
            raise ConfigurationError("stage1 epochs/batch_size/frames out of range")
        if self.tau <= 0:
            raise ConfigurationError(f"stage1.tau must be positive, got {self.tau}")
        self.schedule.validate()

    @property
    def frozen_encoder(self) -> str:
        return "visual" if self.mode == VIDEO else "skeleton"


@dataclass
class Stage2Config:
    epochs: int = 20
    p: int = 4
    k: int = 4
    lambda1: float = 1.0
    lambda2: float = 1.3
    margin: float = 0.3
    smoothing: float = 0.1
    frames: int = 8
    mode: str = VIDEO
    use_pfu: bool = True
    use_pfu_fusion: bool = True
    use_pfu_update: bool = True
    use_sgtm: bool = True
    use_atd: bool = True
    seed: int = 0
    schedule: LRSchedule = field(default_factory=LRSchedule)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"stage2.mode must be one of {MODES}, got '{self.mode}'")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("stage2 loss weights must be non-negative")
        if self.p < 2 or self.k < 2:
            raise ConfigurationError(f"stage2 PK sampling needs P >= 2 and K >= 2, got P={self.p} K={self.k}")
        if self.epochs < 0 or self.frames < 1:
            raise ConfigurationError("stage2 epochs/frames out of range")
        if self.mode == SKELETON and self.use_sgtm:
            raise ConfigurationError("skeleton-only finetuning has no temporal model; set stage2.use_sgtm=false")
        self.schedule.validate()


@dataclass
class EvalConfig:
    exclude_same_camera: bool = True
    frames: int = 8
    ranks: Tuple[int, ...] = (1, 5, 10)
    # L2-normalize projected features for skeleton-to-visual retrieval
    normalize_cross_modal: bool = True
    per_query: bool = False


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sgt: SGTConfig = field(default_factory=SGTConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR

    def validate(self) -> "ExperimentConfig":
        self.model.visual_config().validate()
        self.sgt.validate()
        self.data.validate()
        self.stage1.validate()
        self.stage2.validate()
        if self.sgt.dim != self.model.dim:
            raise ConfigurationError(f"sgt.dim={self.sgt.dim} must equal model.dim={self.model.dim}")
        if self.sgt.heads <= 0 or self.sgt.dim % self.sgt.heads:
            raise ConfigurationError(f"sgt.dim={self.sgt.dim} is not divisible by {self.sgt.heads} heads")
        if (self.data.image_height, self.data.image_width) != (self.model.image_height, self.model.image_width):
            raise ConfigurationError("data and model frame sizes differ")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.seed = seed
        self.data.seed = seed
        self.stage1.seed = seed
        self.stage2.seed = seed
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


SECTIONS = ("model", "sgt", "data", "stage1", "stage2", "eval")


def _coerce(current: Any, value: Any, where: str) -> Any:
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where} expects an object")
        return merge(current, value, where)
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigurationError(f"{where} expects true/false, got {value!r}")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def merge(instance, values: Dict[str, Any], where: str = ""):
    """Return a copy of a config dataclass with ``values`` applied; unknown keys are errors."""
    known = {f.name for f in dataclasses.fields(instance)}
    changes = {}
    for key, value in values.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigurationError(f"unknown config key '{path}'")
        changes[key] = _coerce(getattr(instance, key), value, path)
    return dataclasses.replace(instance, **changes)


def parse_override(text: str) -> Tuple[Tuple[str, ...], Any]:
    """``stage2.use_sgtm=false`` → (("stage2", "use_sgtm"), False); non-JSON values stay strings."""
    if "=" not in text:
        raise ConfigurationError(f"override '{text}' must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    path = tuple(part for part in key.strip().split(".") if part)
    if not path:
        raise ConfigurationError(f"override '{text}' has an empty key")
    return path, value


def _nest(path: Tuple[str, ...], value: Any) -> Dict[str, Any]:
    for part in reversed(path):
        value = {part: value}
    return value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None) -> ExperimentConfig:
    """
    Build the experiment config.

    Args:
        path: JSON file with any of the sections model/sgt/data/stage1/stage2/eval
        overrides: ``section.key=value`` strings applied after the file
        seed: Replaces every section seed when given

    Returns:
        Validated ExperimentConfig
    """
    load_dotenv()
    cfg = ExperimentConfig(output_dir=os.getenv("REID_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))
    if path:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}: malformed JSON at offset {e.pos}: {e.msg}") from None
        cfg = merge(cfg, document)
        logger.info(f"Loaded config from {path}")
    for text in overrides:
        key_path, value = parse_override(text)
        cfg = merge(cfg, _nest(key_path, value))
        logger.debug(f"Override {'.'.join(key_path)}={value!r}")
    if seed is not None:
        cfg.with_seed(seed)
    return cfg.validate()
