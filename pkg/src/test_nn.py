import math

import numpy as np
import pytest

from src import tensor as T
from src.errors import ConfigurationError, ShapeError
from src.nn import (Linear, MLP2, Module, MultiHeadAttention, TransformerBlock, cross_attention,
                    self_attention)
from src.tensor import Tensor


def _softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def _attention_oracle(attn: MultiHeadAttention, q_in: np.ndarray, kv_in: np.ndarray) -> np.ndarray:
    """Loop-based multi-head attention for one N×L×C batch."""
    def proj(layer, x):
        return x @ layer.weight.data + layer.bias.data

    n, lq, c = q_in.shape
    lk = kv_in.shape[1]
    h, d = attn.heads, attn.head_dim
    out = np.zeros((n, lq, c))
    for b in range(n):
        q, k, v = proj(attn.q_proj, q_in[b]), proj(attn.k_proj, kv_in[b]), proj(attn.v_proj, kv_in[b])
        mixed = np.zeros((lq, c))
        for head in range(h):
            cols = slice(head * d, (head + 1) * d)
            for i in range(lq):
                scores = np.array([q[i, cols] @ k[j, cols] for j in range(lk)]) / math.sqrt(d)
                weights = _softmax(scores)
                mixed[i, cols] = sum(weights[j] * v[j, cols] for j in range(lk))
        out[b] = proj(attn.out_proj, mixed)
    return out


def test_linear_shape_and_mismatch():
    layer = Linear(4, 3, np.random.default_rng(0))
    assert layer(Tensor(np.ones((2, 5, 4)))).shape == (2, 5, 3)
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((2, 3))))


def test_zero_init_linear_outputs_zero():
    layer = Linear(4, 3, np.random.default_rng(0), zero_init=True)
    assert layer.init_scheme == "zero"
    assert np.array_equal(layer(Tensor(np.ones((2, 4)))).data, np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(100))
def test_self_attention_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    attn = MultiHeadAttention(8, 2, r)
    x = r.normal(size=(2, 3, 8))
    out = self_attention(Tensor(x), attn).data
    assert np.allclose(out, _attention_oracle(attn, x, x), atol=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_cross_attention_matches_loop_oracle(seed):
    r = np.random.default_rng(100 + seed)
    attn = MultiHeadAttention(8, 4, r)
    q, kv = r.normal(size=(1, 2, 8)), r.normal(size=(1, 5, 8))
    out = cross_attention(Tensor(q), Tensor(kv), attn).data
    assert np.allclose(out, _attention_oracle(attn, q, kv), atol=1e-9)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_zero_init_block_is_identity():
    block = TransformerBlock(8, 2, np.random.default_rng(0), zero_init=True)
    x = np.random.default_rng(1).normal(size=(2, 3, 8))
    assert np.array_equal(block(Tensor(x)).data, x)


class _Pair(Module):
    def __init__(self):
        r = np.random.default_rng(0)
        self.encoder = MLP2(3, 4, 2, r)
        self.blocks = [Linear(2, 2, r), Linear(2, 2, r)]
        self._scratch = Linear(2, 2, r)


def test_named_parameters_use_dotted_paths():
    names = [name for name, _ in _Pair().named_parameters()]
    assert names == ["encoder.fc1.weight", "encoder.fc1.bias", "encoder.fc2.weight", "encoder.fc2.bias",
                     "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias"]


def test_freeze_and_unfreeze():
    model = _Pair()
    model.encoder.freeze()
    trainable = model.trainable_parameters()
    assert all(not name.startswith("encoder") for name in trainable)
    model.unfreeze()
    assert len(model.trainable_parameters()) == 8


def test_state_dict_roundtrip_and_strictness():
    a, b = _Pair(), _Pair()
    for p in b.parameters():
        p.data = p.data + 1.0
    a.load_state_dict(b.state_dict())
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data)
    state = b.state_dict()
    state.pop("blocks.1.bias")
    with pytest.raises(ConfigurationError):
        a.load_state_dict(state)
    a.load_state_dict(state, strict=False)


def test_replace_parameter_swaps_and_returns_previous():
    model = _Pair()
    stand_in = Tensor(np.zeros((2, 2)), requires_grad=True)
    previous = model.replace_parameter("blocks.1.weight", stand_in)
    assert model.blocks[1].weight is stand_in
    model.replace_parameter("blocks.1.weight", previous)
    assert model.blocks[1].weight is previous


def test_mlp_gradients_reach_both_layers():
    mlp = MLP2(3, 4, 2, np.random.default_rng(3))
    x = Tensor(np.random.default_rng(4).normal(size=(5, 3)))
    T.sum(mlp(x)).backward()
    assert mlp.fc1.weight.grad is not None and mlp.fc2.bias.grad is not None
    assert np.allclose(mlp.fc2.bias.grad, 5.0)
