"""Adam and the warmup/step learning-rate schedule."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.errors import ConfigurationError
from src.nn import Parameter

logger = logging.getLogger(__name__)


@dataclass
class LRSchedule:
    warmup_epochs: int = 10
    lr_start: float = 5e-7
    lr_peak: float = 5e-6
    decay: float = 0.1
    milestones: Tuple[int, ...] = (30, 50, 70)

    def validate(self) -> None:
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be non-negative")
        if self.lr_start < 0 or self.lr_peak <= 0 or self.decay <= 0:
            raise ConfigurationError("learning rates and decay must be positive")
        milestones = list(self.milestones)
        if milestones != sorted(set(milestones)):
            raise ConfigurationError(f"milestones must be strictly increasing, got {milestones}")
        if milestones and milestones[0] < self.warmup_epochs:
            raise ConfigurationError("first milestone falls inside the warmup")

    def lr_at(self, epoch: int) -> float:
        """
        Linear warmup from lr_start to lr_peak, then ×decay at each milestone reached.

        Values are rounded to 12 significant digits so logged rates read as
        the configured constants (5e-07, not 5.000000000000001e-07).
        """
        if epoch < 0:
            raise ConfigurationError(f"epoch must be non-negative, got {epoch}")
        if epoch < self.warmup_epochs:
            lr = self.lr_start + (self.lr_peak - self.lr_start) * epoch / self.warmup_epochs
        else:
            reached = sum(1 for milestone in self.milestones if epoch >= milestone)
            lr = self.lr_peak * self.decay ** reached
        return float(f"{lr:.12g}")


def lr_at(epoch: int, schedule: Optional[LRSchedule] = None) -> float:
    return (schedule or LRSchedule()).lr_at(epoch)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, Optional[np.ndarray]],
              state: OptimizerState, lr: float) -> OptimizerState:
    """
    One bias-corrected Adam update.

    Args:
        params: Parameters by path, updated in place
        grads: Gradients by path; missing or None entries leave the parameter untouched
        state: Moment estimates and step count, advanced in place
        lr: Learning rate for this step

    Returns:
        The advanced state
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {path} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(path, np.zeros_like(p.data))
        v = state.v.get(path, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[path], state.v[path] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Adam over a fixed parameter set, reading gradients from ``param.grad``."""

    def __init__(self, params: Mapping[str, Parameter], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step(self.params, {path: p.grad for path, p in self.params.items()}, self.state, lr)
