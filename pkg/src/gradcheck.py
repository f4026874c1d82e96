"""
Registry of finite-difference gradient checks.

Every differentiable primitive, layer and loss registers a builder that,
given a random stream, returns a scalar function and the point to check it
at. ``run_gradchecks`` evaluates each builder over many seeds and reports
the worst relative error.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from src import rng as rng_streams
from src import tensor as T
from src.align import AlignedBatch, AlignmentHeads, contrastive_losses
from src.errors import ConfigurationError
from src.losses import CEConfig, IdentityClassifier, TripletConfig, batch_hard_triplet, ce_label_smoothing
from src.nn import LayerNorm, Linear, MLP2, Module, MultiHeadAttention, TransformerBlock
from src.pfu import FusionGate, PrototypeUpdater, fuse, prototype_loss, update
from src.sgtm import (AuxiliaryTemporalDistillation, FrameClassifier, MessageTokenEncoder, TypeEmbeddingTable,
                      TRAIN, assemble, frame_logits_and_loss, temporal_aggregate)
from src.skeleton_encoder import GraphPrototypeBank, SGTConfig, SkeletonEncoder, SkeletonGraph
from src.tensor import Tensor
from src.visual_encoder import VisualEncoder, VisualEncoderConfig

logger = logging.getLogger(__name__)

TOLERANCE = 1e-3
STEP = 1e-5
DEFAULT_SEEDS = 20

Check = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], Tensor]]
REGISTRY: Dict[str, Check] = {}


def register(name: str):
    def wrap(fn: Check) -> Check:
        REGISTRY[name] = fn
        return fn
    return wrap


@dataclass
class GradcheckResult:
    name: str
    seeds: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def away_from_zero(x: np.ndarray, gap: float = 0.1) -> np.ndarray:
    """Push values out of (-gap, gap) so kinks stay outside the difference stencil."""
    return np.where(np.abs(x) < gap, x + np.sign(x + 1e-300) * 2 * gap, x)


def projected(op: Callable[[Tensor], Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Scalarize a tensor-valued op with a fixed random linear functional."""
    return lambda x: T.sum(op(x) * Tensor(weights))


def parameter_check(module: Module, path: str, loss: Callable[[], Tensor]) -> Tuple[Callable[[Tensor], Tensor], Tensor]:
    """Differentiate ``loss`` with respect to one parameter by swapping in a free leaf tensor."""
    owner, leaf = module._owner(path)
    point = Tensor(getattr(owner, leaf).data)

    def f(x: Tensor) -> Tensor:
        previous = module.replace_parameter(path, x)
        try:
            return loss()
        finally:
            module.replace_parameter(path, previous)

    return f, point


def _unary(op, r, shape=(3, 4), positive=False, kinked=False):
    x = r.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    if kinked:
        x = away_from_zero(x)
    out_shape = op(Tensor(x)).shape
    return projected(op, r.normal(size=out_shape)), Tensor(x)


# -- primitives ---------------------------------------------------------------------

@register("add")
def _check_add(r):
    other = Tensor(r.normal(size=(3, 4)))
    return _unary(lambda x: T.add(x, other), r)


@register("sub")
def _check_sub(r):
    other = Tensor(r.normal(size=(3, 4)))
    return _unary(lambda x: T.sub(other, x), r)


@register("mul")
def _check_mul(r):
    return _unary(lambda x: T.mul(x, x), r)


@register("scale")
def _check_scale(r):
    factor = float(r.normal())
    return _unary(lambda x: T.scale(x, factor), r)


@register("matmul")
def _check_matmul(r):
    b = Tensor(r.normal(size=(4, 2)))
    return _unary(lambda x: T.matmul(x, b) + T.matmul(x, T.transpose(x))[:, :2], r)


@register("matmul_batched")
def _check_matmul_batched(r):
    return _unary(lambda x: T.matmul(x, T.transpose(x, (0, 2, 1))), r, shape=(2, 3, 2))


@register("transpose")
def _check_transpose(r):
    return _unary(lambda x: T.transpose(x, (2, 0, 1)), r, shape=(2, 3, 2))


@register("reshape")
def _check_reshape(r):
    return _unary(lambda x: T.reshape(x, (2, 6)), r)


@register("broadcast_to")
def _check_broadcast(r):
    return _unary(lambda x: T.broadcast_to(x, (2, 3, 4)), r, shape=(3, 1))


@register("concat")
def _check_concat(r):
    other = Tensor(r.normal(size=(3, 2)))
    return _unary(lambda x: T.concat([x, other, x], axis=1), r)


@register("slice")
def _check_slice(r):
    rows = r.integers(0, 3, size=5)
    return _unary(lambda x: x[1:, ::2] + x[rows, 0:2][:2], r)


@register("embedding")
def _check_embedding(r):
    ids = r.integers(0, 5, size=(2, 3))
    return _unary(lambda x: T.embedding(x, ids), r, shape=(5, 3))


@register("exp")
def _check_exp(r):
    return _unary(T.exp, r)


@register("log")
def _check_log(r):
    return _unary(T.log, r, positive=True)


@register("relu")
def _check_relu(r):
    return _unary(T.relu, r, kinked=True)


@register("sigmoid")
def _check_sigmoid(r):
    return _unary(T.sigmoid, r)


@register("tanh")
def _check_tanh(r):
    return _unary(T.tanh, r)


@register("sqrt")
def _check_sqrt(r):
    return _unary(T.sqrt, r, positive=True)


@register("abs")
def _check_abs(r):
    return _unary(T.absolute, r, kinked=True)


@register("clamp_min")
def _check_clamp(r):
    return _unary(lambda x: T.clamp_min(x, 0.0), r, kinked=True)


@register("softmax")
def _check_softmax(r):
    return _unary(T.softmax, r)


@register("log_softmax")
def _check_log_softmax(r):
    return _unary(T.log_softmax, r)


@register("sum")
def _check_sum(r):
    return _unary(lambda x: T.sum(x, axis=0) * T.sum(x, axis=(0, 1)), r)


@register("mean")
def _check_mean(r):
    return _unary(lambda x: T.mean(x, axis=1, keepdims=True), r)


@register("l1_norm")
def _check_l1(r):
    return _unary(lambda x: T.l1_norm(x, axis=-1), r, kinked=True)


@register("l2_norm")
def _check_l2(r):
    return _unary(lambda x: T.l2_norm(x, axis=0), r)


@register("pairwise_sq_dist")
def _check_pairwise(r):
    other = Tensor(r.normal(size=(3, 4)))
    return _unary(lambda x: T.pairwise_sq_dist(x, other) + T.pairwise_sq_dist(x, x), r)


@register("layer_norm")
def _check_layer_norm(r):
    return _unary(T.layer_norm, r)


# -- layers -------------------------------------------------------------------------

@register("nn.linear")
def _check_linear(r):
    layer = Linear(4, 3, r)
    return _unary(layer, r)


@register("nn.layer_norm")
def _check_layer_norm_module(r):
    norm = LayerNorm(4)
    norm.gamma.data = r.normal(size=4)
    x = Tensor(r.normal(size=(3, 4)))
    weights = r.normal(size=(3, 4))
    return parameter_check(norm, "gamma", lambda: T.sum(norm(x) * Tensor(weights)))


@register("nn.mlp2")
def _check_mlp(r):
    mlp = MLP2(4, 5, 2, r)
    return _unary(mlp, r)


@register("nn.self_attention")
def _check_self_attention(r):
    attn = MultiHeadAttention(4, 2, r)
    return _unary(attn, r, shape=(2, 3, 4))


@register("nn.cross_attention")
def _check_cross_attention(r):
    attn = MultiHeadAttention(4, 2, r)
    context = Tensor(r.normal(size=(2, 4)))
    return _unary(lambda x: attn(x, context), r, shape=(3, 4))


@register("nn.cross_attention.keys")
def _check_cross_attention_keys(r):
    attn = MultiHeadAttention(4, 2, r)
    queries = Tensor(r.normal(size=(3, 4)))
    return _unary(lambda x: attn(queries, x), r, shape=(2, 4))


@register("nn.transformer_block")
def _check_block(r):
    block = TransformerBlock(4, 2, r)
    return _unary(block, r, shape=(1, 3, 4))


@register("visual_encoder")
def _check_visual_encoder(r):
    cfg = VisualEncoderConfig(image_height=16, image_width=8, patch_height=8, patch_width=8,
                              depth=2, heads=2, dim=8)
    encoder = VisualEncoder(cfg, r)
    frames = r.uniform(0.0, 1.0, size=(1, 2, 16, 8, 3))
    weights = r.normal(size=(1, 2, 3, 8))
    return parameter_check(encoder, "cls_token",
                           lambda: T.sum(encoder.encode_batch(frames) * Tensor(weights)))


def _toy_graph() -> SkeletonGraph:
    return SkeletonGraph.from_edges([f"j{i}" for i in range(5)], [(0, 1), (1, 2), (1, 3), (3, 4)])


def _toy_encoder(r, **overrides) -> SkeletonEncoder:
    cfg = SGTConfig(layers=1, heads=2, dim=16, pe_dim=2, **overrides)
    return SkeletonEncoder(cfg, _toy_graph(), r)


@register("skeleton.graph_embed")
def _check_graph_embed(r):
    enc = _toy_encoder(r)
    return _unary(enc.graph_embed, r, shape=(5, 3))


@register("skeleton.encode_batch")
def _check_encode_batch(r):
    enc = _toy_encoder(r)
    joints = r.normal(size=(1, 2, 5, 3))
    weights = r.normal(size=(1, 2, 6, 16))
    return parameter_check(enc, "fc1.weight",
                           lambda: T.sum(enc.encode_batch(joints).tokens * Tensor(weights)))


@register("skeleton.summary")
def _check_summary(r):
    enc = _toy_encoder(r)
    joints = r.normal(size=(2, 2, 5, 3))
    weights = r.normal(size=(2, 16))
    return parameter_check(enc, "summary",
                           lambda: T.sum(enc.encode_batch(joints).tokens[:, 0, 0] * Tensor(weights)))


# -- losses -------------------------------------------------------------------------

def _aligned(r, labels):
    heads = AlignmentHeads(4, 4, r, tau=0.5)
    skeleton = Tensor(r.normal(size=(len(labels), 4)))
    return heads, skeleton


@register("loss.v2s")
def _check_v2s(r):
    labels = np.array([0, 0, 1, 2])
    heads, skeleton = _aligned(r, labels)
    return _unary(lambda x: contrastive_losses(AlignedBatch(x, skeleton, labels), heads)[0], r, shape=(4, 4))


@register("loss.s2v")
def _check_s2v(r):
    labels = np.array([0, 1, 1, 2])
    heads, skeleton = _aligned(r, labels)
    return _unary(lambda x: contrastive_losses(AlignedBatch(x, skeleton, labels), heads)[1], r, shape=(4, 4))


@register("loss.proto")
def _check_proto(r):
    k, c, b = 3, 4, 2
    gate = FusionGate(c, r)
    updater = PrototypeUpdater(c, 2, r, expected_tokens=5)
    updater.mlp.fc2.weight.data = r.normal(scale=0.5, size=updater.mlp.fc2.weight.shape)
    p_s, p_v = Tensor(r.normal(size=(k, c))), Tensor(r.normal(size=(k, c)))
    tokens = Tensor(r.normal(size=(b, 5, c)))
    labels = r.integers(0, k, size=b)

    def loss(x):
        p_f, _ = fuse(p_s, p_v, gate)
        return prototype_loss(x, labels, update(p_f, tokens, updater))

    return loss, Tensor(r.normal(size=(b, c)))


@register("loss.proto.gate")
def _check_proto_gate(r):
    k, c, b = 3, 4, 2
    gate = FusionGate(c, r)
    updater = PrototypeUpdater(c, 2, r, expected_tokens=5)
    updater.mlp.fc2.weight.data = r.normal(scale=0.5, size=updater.mlp.fc2.weight.shape)
    p_s, p_v = Tensor(r.normal(size=(k, c))), Tensor(r.normal(size=(k, c)))
    tokens = Tensor(r.normal(size=(b, 5, c)))
    feats = Tensor(r.normal(size=(b, c)))
    labels = r.integers(0, k, size=b)

    def loss():
        p_f, _ = fuse(p_s, p_v, gate)
        return prototype_loss(feats, labels, update(p_f, tokens, updater))

    return parameter_check(gate, "mlp.fc1.weight", loss)


@register("loss.frame")
def _check_frame(r):
    b, t, c, k = 1, 2, 4, 3
    mte_vis, mte_ske = MessageTokenEncoder(c, 2, r), MessageTokenEncoder(c, 2, r)
    distill = AuxiliaryTemporalDistillation(c, 2, r, zero_init=False)
    table = TypeEmbeddingTable(c, r)
    block = TransformerBlock(c, 2, r)
    head = FrameClassifier(c, k, r)
    s_tokens = Tensor(r.normal(size=(b, t, 3, c)))
    labels = r.integers(0, k, size=b)

    def loss(v_tokens):
        m_ske = mte_ske(s_tokens)
        m_hat = distill(mte_vis(v_tokens), m_ske)
        x = temporal_aggregate(assemble(v_tokens, m_hat, s_tokens, m_ske, table, TRAIN), block)
        return frame_logits_and_loss(x, head, labels)[1]

    return loss, Tensor(r.normal(size=(b, t, 2, c)))


@register("loss.ce")
def _check_ce(r):
    classifier = IdentityClassifier(4, CEConfig(num_classes=5, smoothing=0.1), r)
    labels = r.integers(0, 5, size=3)
    return lambda x: ce_label_smoothing(x, labels, classifier), Tensor(r.normal(size=(3, 4)))


@register("loss.triplet")
def _check_triplet(r):
    labels = np.array([0, 0, 1, 1, 2, 2])
    cfg = TripletConfig(margin=0.3)
    while True:
        x = r.normal(size=(6, 3))
        d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
        same = labels[:, None] == labels[None]
        hinge = np.max(np.where(same, d, -np.inf), 1) - np.min(np.where(same, np.inf, d), 1) + cfg.margin
        off_diag = d[~np.eye(6, dtype=bool)]
        if np.all(np.abs(hinge) > 1e-2) and np.min(off_diag) > 1e-2 and _unique_extremes(d, same):
            break
    return lambda f: batch_hard_triplet(f, labels, cfg), Tensor(x)


def _unique_extremes(d: np.ndarray, same: np.ndarray, gap: float = 1e-2) -> bool:
    for row, mask in zip(d, same):
        pos = np.sort(row[mask])[::-1]
        neg = np.sort(row[~mask])
        if len(pos) > 1 and pos[0] - pos[1] < gap or len(neg) > 1 and neg[1] - neg[0] < gap:
            return False
    return True


@register("loss.gpc")
def _check_gpc(r):
    enc = _toy_encoder(r)
    joints = r.normal(size=(3, 2, 5, 3))
    labels = np.array([0, 1, 2])
    bank = GraphPrototypeBank(r.normal(size=(3, 16)))

    def loss():
        out = enc.encode_batch(joints)
        return enc.gpc_loss(out.seq_feat, out.frame_feats, labels, bank)

    return parameter_check(enc, "fc_pos.weight", loss)


@register("loss.gpc.f2")
def _check_gpc_f2(r):
    enc = _toy_encoder(r)
    joints = r.normal(size=(2, 2, 5, 3))
    labels = np.array([0, 1])
    bank = GraphPrototypeBank(r.normal(size=(2, 16)))

    def loss():
        out = enc.encode_batch(joints)
        return enc.gpc_loss(out.seq_feat, out.frame_feats, labels, bank)

    return parameter_check(enc, "gpc_f2.bias", loss)


@register("loss.stpr")
def _check_stpr(r):
    enc = _toy_encoder(r, mask_ratio=0.4)
    joints = r.normal(size=(1, 3, 5, 3))
    mask_seed = int(r.integers(0, 2 ** 31))
    return parameter_check(enc, "structure_prompt",
                           lambda: enc.stpr_loss(joints, rng_streams.stream(mask_seed, "stpr", 0)))


@register("loss.stpr.trajectory")
def _check_stpr_trajectory(r):
    enc = _toy_encoder(r, mask_ratio=0.4)
    joints = r.normal(size=(1, 3, 5, 3))
    mask_seed = int(r.integers(0, 2 ** 31))
    return parameter_check(enc, "trajectory_prompt",
                           lambda: enc.stpr_loss(joints, rng_streams.stream(mask_seed, "stpr", 0)))


def check_names() -> List[str]:
    return sorted(REGISTRY)


def run_check(name: str, seeds: int = DEFAULT_SEEDS, base_seed: int = 0) -> GradcheckResult:
    worst = 0.0
    for s in range(seeds):
        f, x = REGISTRY[name](rng_streams.stream(base_seed, f"gradcheck/{name}", s))
        worst = max(worst, T.finite_diff_check(f, x, STEP))
    return GradcheckResult(name, seeds, worst)


def run_gradchecks(names: Optional[Iterable[str]] = None, seeds: int = DEFAULT_SEEDS,
                   base_seed: int = 0) -> List[GradcheckResult]:
    results = []
    for name in (list(names) if names else check_names()):
        if name not in REGISTRY:
            raise ConfigurationError(f"unknown gradient check '{name}'")
        result = run_check(name, seeds, base_seed)
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, f"gradcheck {name}: max error {result.max_error:.3e}")
        results.append(result)
    return results
