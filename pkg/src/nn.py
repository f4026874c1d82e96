"""
Neural building blocks shared by the encoders and the Stage-2 modules.

Modules keep their parameters as attributes; ``named_parameters`` walks the
attribute tree and yields dotted paths such as ``sgtm.atd.q_proj.weight``,
which are also the checkpoint keys.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src import tensor as T
from src.errors import ConfigurationError, ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Base class: parameter discovery, freezing and state (de)serialization."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {path: p for path, p in self.named_parameters() if p.requires_grad}

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {path: p.data.copy() for path, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into parameters by path.

        Args:
            state: Mapping of parameter path to array
            strict: Require an exact match of the path sets
        """
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ConfigurationError(
                    f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for path, p in own.items():
            if path not in state:
                continue
            value = np.asarray(state[path], dtype=T.DTYPE)
            if value.shape != p.shape:
                raise ShapeError(f"load_state_dict[{path}]", p.shape, value.shape)
            p.data = value.copy()

    def _owner(self, path: str) -> Tuple[object, str]:
        *parts, leaf = path.split(".")
        node: object = self
        for part in parts:
            node = node[int(part)] if isinstance(node, (list, tuple)) else getattr(node, part)
        return node, leaf

    def replace_parameter(self, path: str, value: Tensor) -> Tensor:
        """Swap the tensor at ``path`` for ``value``; returns the previous one."""
        owner, leaf = self._owner(path)
        previous = getattr(owner, leaf)
        setattr(owner, leaf, value)
        return previous


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """
    y = x W + b over the last axis.

    Args:
        in_dim: Input width
        out_dim: Output width
        rng: Generator for the centered-uniform 1/sqrt(fan_in) init
        zero_init: Start with W = 0 and b = 0
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero_init: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.init_scheme = "zero" if zero_init else "uniform"
        if zero_init:
            self.weight = Parameter(np.zeros((in_dim, out_dim)))
            self.bias = Parameter(np.zeros(out_dim))
        else:
            self.weight = Parameter(uniform_init(rng, in_dim, (in_dim, out_dim)))
            self.bias = Parameter(uniform_init(rng, in_dim, (out_dim,)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("linear", x.shape, self.weight.shape)
        y = T.matmul(x, self.weight)
        return y + T.broadcast_to(self.bias, y.shape)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = T.LAYER_NORM_EPS):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        y = T.layer_norm(x, self.eps)
        return y * T.broadcast_to(self.gamma, y.shape) + T.broadcast_to(self.beta, y.shape)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, std, size=(num, dim)))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


ACTIVATIONS = {
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "identity": lambda x: x,
}


class MLP2(Module):
    """FC2(act(FC1(x))), ReLU by default."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator,
                 activation: str = "relu", zero_init_output: bool = False):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{activation}'")
        self.activation = activation
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, out_dim, rng, zero_init=zero_init_output)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ACTIVATIONS[self.activation](self.fc1(x)))


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with ``heads`` heads of width ``dim // heads``.

    Inputs are N×L×C (a 2-D L×C input is treated as N = 1). Queries come from
    the first argument; keys and values from ``context`` (defaults to the
    queries, i.e. self-attention).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_init_output: bool = False):
        if heads <= 0 or dim % heads != 0:
            raise ConfigurationError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=zero_init_output)

    def _split(self, x: Tensor, n: int, length: int) -> Tensor:
        x = T.reshape(x, (n, length, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def forward(self, query: Tensor, context: Optional[Tensor] = None) -> Tensor:
        context = query if context is None else context
        squeeze = query.ndim == 2
        if squeeze:
            query = T.reshape(query, (1,) + query.shape)
            context = T.reshape(context, (1,) + context.shape)
        if query.ndim != 3 or context.ndim != 3 or query.shape[-1] != self.dim \
                or context.shape[-1] != self.dim or query.shape[0] != context.shape[0]:
            raise ShapeError("attention", query.shape, context.shape)
        n, lq, _ = query.shape
        lk = context.shape[1]

        q = self._split(self.q_proj(query), n, lq)
        k = self._split(self.k_proj(context), n, lk)
        v = self._split(self.v_proj(context), n, lk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        weights = T.softmax(scores)
        mixed = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        out = self.out_proj(T.reshape(mixed, (n, lq, self.dim)))
        if squeeze:
            out = T.reshape(out, (lq, self.dim))
        return out


def self_attention(x: Tensor, attn: MultiHeadAttention) -> Tensor:
    return attn(x)


def cross_attention(q_tokens: Tensor, kv_tokens: Tensor, attn: MultiHeadAttention) -> Tensor:
    if q_tokens.shape[-1] != kv_tokens.shape[-1]:
        raise ShapeError("cross_attention", q_tokens.shape, kv_tokens.shape)
    return attn(q_tokens, kv_tokens)


def mlp2(x: Tensor, mlp: MLP2) -> Tensor:
    return mlp(x)


class TransformerBlock(Module):
    """
    Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).

    With ``zero_init`` both residual branches end in zero projections, so the
    block starts as the identity map.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 2, zero_init: bool = False):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_init_output=zero_init)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP2(dim, dim * mlp_ratio, dim, rng, zero_init_output=zero_init)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
