"""Mini vision transformer producing (1+N_p) tokens per image frame."""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from src import tensor as T
from src.errors import ConfigurationError, DataError
from src.nn import Embedding, Linear, Module, Parameter, TransformerBlock
from src.tensor import Tensor
from src.tracklet import ImageSequence

logger = logging.getLogger(__name__)


@dataclass
class VisualEncoderConfig:
    image_height: int = 32
    image_width: int = 16
    patch_height: int = 8
    patch_width: int = 8
    depth: int = 2
    heads: int = 4
    dim: int = 64
    mlp_ratio: int = 2
    cls_init_std: float = 0.02
    # 256×128 frames with 16×16 patches; used for shape checks only
    full_scale: bool = False

    def __post_init__(self):
        if self.full_scale:
            self.image_height, self.image_width = 256, 128
            self.patch_height, self.patch_width = 16, 16

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_height // self.patch_height, self.image_width // self.patch_width

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    def validate(self) -> None:
        if self.image_height % self.patch_height or self.image_width % self.patch_width:
            raise ConfigurationError(
                f"frame {self.image_height}×{self.image_width} is not divisible into "
                f"{self.patch_height}×{self.patch_width} patches")
        if self.depth < 0:
            raise ConfigurationError("model.depth must be non-negative")


def patchify(frames: np.ndarray, patch_height: int, patch_width: int) -> np.ndarray:
    """N×H×W×3 frames → N×N_p×(ph·pw·3) flattened patches in row-major grid order."""
    n, h, w, ch = frames.shape
    if h % patch_height or w % patch_width:
        raise ConfigurationError(f"frame {h}×{w} is not divisible into {patch_height}×{patch_width} patches")
    rows, cols = h // patch_height, w // patch_width
    grid = frames.reshape(n, rows, patch_height, cols, patch_width, ch)
    grid = grid.transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(n, rows * cols, patch_height * patch_width * ch)


class VisualEncoder(Module):
    """
    Patch embedding, class token, factorized row/column positional embedding
    and ``depth`` transformer blocks. Frames are encoded independently.
    """

    def __init__(self, cfg: VisualEncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        rows, cols = cfg.grid
        c = cfg.dim
        self.patch_embed = Linear(cfg.patch_height * cfg.patch_width * 3, c, rng)
        self.cls_token = Parameter(rng.normal(0.0, cfg.cls_init_std, size=c))
        self.row_embed = Embedding(rows, c, rng)
        self.col_embed = Embedding(cols, c, rng)
        self.cls_pos = Parameter(rng.normal(0.0, 0.02, size=c))
        self.blocks = [TransformerBlock(c, cfg.heads, rng, mlp_ratio=cfg.mlp_ratio)
                       for _ in range(cfg.depth)]
        grid_rows, grid_cols = np.divmod(np.arange(rows * cols), cols)
        self._grid_rows = grid_rows
        self._grid_cols = grid_cols

    @property
    def num_tokens(self) -> int:
        return 1 + self.cfg.num_patches

    def positional_embedding(self) -> Tensor:
        """(1+N_p)×C: class-token position followed by row + column terms per patch."""
        c = self.cfg.dim
        patches = self.row_embed(self._grid_rows) + self.col_embed(self._grid_cols)
        return T.concat([T.reshape(self.cls_pos, (1, c)), patches], axis=0)

    def embed(self, frames: np.ndarray) -> Tensor:
        n = frames.shape[0]
        c = self.cfg.dim
        patches = self.patch_embed(Tensor(patchify(frames, self.cfg.patch_height, self.cfg.patch_width)))
        cls = T.broadcast_to(self.cls_token, (n, 1, c))
        tokens = T.concat([cls, patches], axis=1)
        return tokens + T.broadcast_to(self.positional_embedding(), tokens.shape)

    def encode_batch(self, frames: np.ndarray) -> Tensor:
        """B×T×H×W×3 → B×T×(1+N_p)×C."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 5:
            raise DataError(f"expected B×T×H×W×3 frames, got {frames.shape}")
        b, t, h, w, _ = frames.shape
        if (h, w) != (self.cfg.image_height, self.cfg.image_width):
            raise ConfigurationError(f"frames are {h}×{w}, encoder expects "
                                     f"{self.cfg.image_height}×{self.cfg.image_width}")
        x = self.embed(frames.reshape(b * t, h, w, 3))
        for block in self.blocks:
            x = block(x)
        return T.reshape(x, (b, t, self.num_tokens, self.cfg.dim))

    def encode_frames(self, seq: Union[ImageSequence, np.ndarray]) -> Tensor:
        frames = seq.frames if isinstance(seq, ImageSequence) else np.asarray(seq, dtype=np.float64)
        return self.encode_batch(frames[None])[0]


def sequence_feature(tokens: Tensor) -> Tensor:
    """Mean over the frame and token axes: …×T×L×C → …×C."""
    return T.mean(tokens, axis=(tokens.ndim - 3, tokens.ndim - 2))
