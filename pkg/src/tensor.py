"""
Dense 64-bit tensors with reverse-mode differentiation.

Every real-valued quantity in the package flows through ``Tensor``. A tensor
built from other tensors remembers its parents and a backward rule; calling
``backward`` on a scalar walks that record in reverse topological order and
deposits gradients on the leaves that asked for them.

Broadcasting is explicit: binary element-wise primitives accept equal shapes
or a 0-d scalar operand, anything else goes through ``broadcast_to``.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (frozen forward passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    A dense row-major array of 64-bit reals with optional gradient tracking.

    Args:
        data: Anything ``numpy.asarray`` accepts
        requires_grad: Whether ``backward`` should deliver a gradient here
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Union[Tensor, float, int, np.ndarray]) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Iterable[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _fit(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back onto a 0-d operand when it was scalar-broadcast."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# -- element-wise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar (the scalar-mul primitive)."""
    factor = float(factor)
    return _result(x.data * factor, (x,), "scale", lambda g: (g * factor,))


# -- linear algebra and layout ---------------------------------------------

def _swap_last(array: np.ndarray) -> np.ndarray:
    return np.swapaxes(array, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every leading index of ``a`` or
    carries exactly the same leading (batch) axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared_rhs = b.ndim == 2

    def backward_fn(g):
        grad_a = np.matmul(g, _swap_last(b.data))
        if shared_rhs:
            k, m = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            grad_b = np.matmul(_swap_last(a.data), g)
        return grad_a, grad_b

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", backward_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose{axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose",
                   lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape->{tuple(shape)}", x.shape) from None
    original = x.shape
    return _result(data, (x,), "reshape", lambda g: (g.reshape(original),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over the copies."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    source = x.shape
    lead = len(shape) - len(source)

    def backward_fn(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        stretched = tuple(i for i, n in enumerate(source) if n == 1 and g.shape[i] != 1)
        if stretched:
            g = g.sum(axis=stretched, keepdims=True)
        return (g.reshape(source),)

    return _result(np.array(data), (x,), "broadcast_to", backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward_fn)


def take(x: Tensor, index) -> Tensor:
    """Slice or gather (``x[index]``); repeated indices accumulate gradient."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    data = x.data[index]
    source = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def backward_fn(g):
        grad = np.zeros(source, dtype=DTYPE)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(data), (x,), "slice", backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape)
    rows = table.shape

    def backward_fn(g):
        grad = np.zeros(rows, dtype=DTYPE)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(table.data[ids], (table,), "embedding", backward_fn)


# -- element-wise unary ----------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), "relu", lambda g: (g * positive,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    above = x.data > floor
    return _result(np.where(above, x.data, floor), (x,), "clamp_min", lambda g: (g * above,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), "softmax", backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), "log_softmax", backward_fn)


# -- reductions --------------------------------------------------------------

def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_back(g: np.ndarray, axes: Tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(axis, x.ndim)
    source = x.shape
    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,), "sum",
                   lambda g: (np.array(_expand_back(g, axes, keepdims, source)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    source = x.shape
    return _result(x.data.mean(axis=axes, keepdims=keepdims), (x,), "mean",
                   lambda g: (np.array(_expand_back(g, axes, keepdims, source)) / count,))


def l1_norm(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    source = x.shape
    sign = np.sign(x.data)
    return _result(np.abs(x.data).sum(axis=axes, keepdims=keepdims), (x,), "l1_norm",
                   lambda g: (_expand_back(g, axes, keepdims, source) * sign,))


def l2_norm(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    source = x.shape
    norm_kept = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    out = norm_kept if keepdims else norm_kept.reshape([n for i, n in enumerate(source) if i not in axes])

    def backward_fn(g):
        safe = np.where(norm_kept > 0, norm_kept, 1.0)
        ratio = np.where(norm_kept > 0, x.data / safe, 0.0)
        return (_expand_back(g, axes, keepdims, source) * ratio,)

    return _result(out, (x,), "l2_norm", backward_fn)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows of ``a`` (N×C) and ``b`` (M×C)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_sq_dist", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]

    def backward_fn(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return _result((diff * diff).sum(axis=-1), (a, b), "pairwise_sq_dist", backward_fn)


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward_fn(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _result(xhat, (x,), "layer_norm", backward_fn)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "slice": take,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "sqrt": sqrt,
    "abs": absolute,
    "clamp_min": clamp_min,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "pairwise_sq_dist": pairwise_sq_dist,
    "layer_norm": layer_norm,
    "embedding": embedding,
}


def primitive_set() -> dict:
    """Catalog of differentiable primitives keyed by name."""
    return dict(PRIMITIVES)


# -- reverse pass ------------------------------------------------------------

@dataclass
class RecordEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor


@dataclass
class ComputationRecord:
    """Primitive applications reachable from an output, inputs before users."""
    entries: List[RecordEntry] = field(default_factory=list)
    leaves: List[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def _topological(output: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def trace(output: Tensor) -> ComputationRecord:
    record = ComputationRecord()
    for node in _topological(output):
        if node._backward is None:
            record.leaves.append(node)
        else:
            record.entries.append(RecordEntry(node._op, node._parents, node))
    return record


def backward(output: Tensor) -> None:
    """
    Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf
    with ``requires_grad``.

    Args:
        output: A single-element tensor produced by differentiable primitives
    """
    if output.size != 1:
        raise ShapeError("backward (scalar output required)", output.shape)
    if not output.requires_grad:
        return
    order = _topological(output)
    grads = {id(output): np.ones(output.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """
    Compare the reverse-mode gradient of ``f`` at ``x`` with central differences.

    Args:
        f: Deterministic function returning a single-element tensor
        x: Point of evaluation (its data is not modified)
        step: Finite-difference step, must be positive

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    base = np.array(x.data, dtype=DTYPE)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ShapeError("finite_diff_check (scalar function required)", shape)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy()
            shifted.flat[i] += step
            upper = f(Tensor(shifted)).item()
            shifted.flat[i] -= 2 * step
            lower = f(Tensor(shifted)).item()
            numeric.flat[i] = (upper - lower) / (2 * step)

    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
