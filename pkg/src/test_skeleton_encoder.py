import math

import numpy as np
import pytest

from src.errors import ConfigurationError, DataError, GraphError
from src.skeleton_encoder import (GraphPrototypeBank, SGTConfig, SkeletonEncoder, SkeletonGraph, laplacian_pe,
                                  sgt_objective)
from src.tensor import Tensor
from src.tracklet import SkeletonSequence


def _path(n):
    return SkeletonGraph.from_edges([f"j{i}" for i in range(n)], [(i, i + 1) for i in range(n - 1)])


def _encoder(graph=None, **overrides):
    graph = graph or _path(5)
    cfg = SGTConfig(**{"layers": 1, "heads": 2, "dim": 8, "pe_dim": 2, **overrides})
    return SkeletonEncoder(cfg, graph, np.random.default_rng(0))


def _zero(layer):
    layer.weight.data = np.zeros_like(layer.weight.data)
    layer.bias.data = np.zeros_like(layer.bias.data)


def test_path_of_three_has_known_eigenvector():
    pe = laplacian_pe(_path(3), 1)
    assert pe.shape == (3, 1)
    assert np.allclose(pe[:, 0], np.array([1.0, 0.0, -1.0]) / math.sqrt(2), atol=1e-9)


def test_human36m_encoding_has_orthonormal_columns():
    graph = SkeletonGraph.human36m()
    assert graph.num_joints == 17
    assert graph.is_connected()
    pe = laplacian_pe(graph, 4)
    assert np.allclose(pe.T @ pe, np.eye(4), atol=1e-9)
    for c in range(4):
        lead = np.nonzero(np.abs(pe[:, c]) > 1e-9)[0][0]
        assert pe[lead, c] > 0


def test_joint_permutation_permutes_encoding_up_to_sign():
    graph = _path(5)
    perm = [3, 0, 4, 1, 2]
    pe = laplacian_pe(graph, 2)
    permuted = laplacian_pe(graph.permuted(perm), 2)
    assert np.allclose(np.abs(permuted), np.abs(pe[perm]), atol=1e-9)


def test_encoding_width_bounds():
    with pytest.raises(GraphError):
        laplacian_pe(_path(3), 3)
    with pytest.raises(GraphError):
        laplacian_pe(_path(3), 0)


def test_disconnected_graph_runs_out_of_eigenvectors():
    graph = SkeletonGraph.from_edges(["a", "b", "c", "d"], [(0, 1), (2, 3)])
    assert not graph.is_connected()
    with pytest.raises(GraphError):
        laplacian_pe(graph, 3)


def test_malformed_graphs_rejected():
    with pytest.raises(GraphError):
        SkeletonGraph.from_edges(["a", "b"], [(0, 0)])
    with pytest.raises(GraphError):
        SkeletonGraph.from_edges(["a", "b"], [(0, 2)])
    with pytest.raises(GraphError):
        SkeletonGraph(["a", "b"], np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_graph_embed_reduces_to_positional_term():
    enc = _encoder()
    _zero(enc.fc1)
    _zero(enc.fc2)
    frames = np.random.default_rng(1).normal(size=(2, 5, 3))
    h0 = enc.graph_embed(frames).data
    expected = enc.pe @ enc.fc_pos.weight.data + enc.fc_pos.bias.data
    assert np.allclose(h0[0], expected) and np.allclose(h0[1], expected)


def test_graph_embed_rejects_wrong_joint_count():
    with pytest.raises(DataError):
        _encoder().graph_embed(np.zeros((1, 4, 3)))


def test_encode_batch_shapes_and_pooling():
    enc = _encoder()
    joints = np.random.default_rng(2).normal(size=(3, 4, 5, 3))
    out = enc.encode_batch(joints)
    assert out.tokens.shape == (3, 4, 6, 8)
    assert out.frame_feats.shape == (3, 4, 8)
    assert np.allclose(out.seq_feat.data, out.frame_feats.data.mean(axis=1))
    # summary token = frame feature + learned summary embedding
    assert np.allclose(out.tokens.data[:, :, 0], out.frame_feats.data + enc.summary.data)


def test_zero_layers_pool_the_embedding():
    enc = _encoder(layers=0)
    joints = np.random.default_rng(3).normal(size=(1, 2, 5, 3))
    out = enc.encode_batch(joints)
    h0 = enc.graph_embed(joints[0]).data
    assert np.allclose(out.frame_feats.data[0], h0.mean(axis=1))


def test_identical_frames_give_identical_features():
    enc = _encoder()
    frame = np.random.default_rng(4).normal(size=(5, 3))
    out = enc.encode_batch(np.stack([frame] * 3)[None])
    feats = out.frame_feats.data[0]
    assert np.allclose(feats[0], feats[1]) and np.allclose(feats[1], feats[2])
    assert np.allclose(out.seq_feat.data[0], feats[0])


def test_encode_sequence_drops_empty_frames():
    enc = _encoder()
    joints = np.random.default_rng(5).normal(size=(3, 5, 3))
    seq = SkeletonSequence(joints, pid=1, camid=0, valid=np.array([True, False, True]))
    tokens, frames, _ = enc.encode_sequence(seq)
    assert tokens.shape == (2, 6, 8) and frames.shape == (2, 8)
    with pytest.raises(DataError):
        enc.encode_sequence(SkeletonSequence(np.zeros((2, 5, 3)), pid=1, camid=0))
    with pytest.raises(DataError):
        enc.encode_batch(np.zeros((1, 0, 5, 3)))


def test_single_identity_bank_gives_zero_contrast():
    enc = _encoder()
    r = np.random.default_rng(6)
    bank = GraphPrototypeBank(r.normal(size=(1, 8)))
    loss = enc.gpc_loss(Tensor(r.normal(size=(3, 8))), Tensor(r.normal(size=(3, 2, 8))), np.zeros(3), bank)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_orthogonal_features_give_log_k():
    enc = _encoder()
    _zero(enc.gpc_f1)
    protos = np.zeros((4, 8))
    protos[:, :4] = np.eye(4)
    seq = np.zeros((2, 8))
    seq[:, 6] = 1.0
    frames = np.random.default_rng(7).normal(size=(2, 3, 8))
    loss = enc.gpc_loss(Tensor(seq), Tensor(frames), np.array([0, 3]), GraphPrototypeBank(protos))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_sequence_contrast_matches_loop_oracle(seed):
    enc = _encoder(gpc_tau1=0.5)
    r = np.random.default_rng(seed)
    protos, seq = r.normal(size=(3, 8)), r.normal(size=(4, 8))
    labels = r.integers(0, 3, size=4)
    l_seq, _ = enc.gpc_terms(Tensor(seq), Tensor(r.normal(size=(4, 2, 8))), labels, GraphPrototypeBank(protos))
    expected = 0.0
    for i in range(4):
        logits = [sum(seq[i, c] * protos[k, c] for c in range(8)) / 0.5 for k in range(3)]
        expected -= logits[labels[i]] - math.log(sum(math.exp(v) for v in logits))
    assert l_seq.item() == pytest.approx(expected / 4, abs=1e-9)


def test_contrast_rejects_labels_outside_bank():
    enc = _encoder()
    with pytest.raises(DataError):
        enc.gpc_loss(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 2, 8))), np.array([2]),
                     GraphPrototypeBank(np.ones((2, 8))))


def test_bank_needs_every_identity():
    with pytest.raises(DataError):
        GraphPrototypeBank.from_features(np.ones((2, 3)), np.array([0, 0]), 2)
    bank = GraphPrototypeBank.from_features(np.array([[1.0], [3.0], [5.0]]), np.array([0, 0, 1]), 2)
    assert np.allclose(bank.prototypes, [[2.0], [5.0]])


def test_reconstruction_is_deterministic_per_stream():
    enc = _encoder(mask_ratio=0.4)
    joints = np.random.default_rng(9).normal(size=(2, 4, 5, 3))
    a = enc.stpr_loss(joints, np.random.default_rng(11)).item()
    b = enc.stpr_loss(joints, np.random.default_rng(11)).item()
    assert a == b
    assert a >= 0.0


def test_structure_only_reconstruction_allows_single_frame():
    joints = np.random.default_rng(10).normal(size=(1, 1, 5, 3))
    assert np.isfinite(_encoder(stpr_beta=1.0).stpr_loss(joints, np.random.default_rng(0)).item())
    with pytest.raises(DataError):
        _encoder(stpr_beta=0.5).stpr_loss(joints, np.random.default_rng(0))


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ConfigurationError):
        _encoder(mask_ratio=1.0)
    with pytest.raises(ConfigurationError):
        _encoder(gpc_alpha=1.5)


def test_objective_mixes_terms():
    assert sgt_objective(2.0, 4.0, 0.5) == pytest.approx(3.0)
    assert sgt_objective(2.0, 4.0, 1.0) == pytest.approx(2.0)
    with pytest.raises(ConfigurationError):
        sgt_objective(2.0, 4.0, -0.1)


def test_frame_contrast_matches_loop_oracle():
    enc = _encoder(gpc_tau2=0.25)
    r = np.random.default_rng(12)
    for _ in range(100):
        protos, frames = r.normal(size=(3, 8)), r.normal(size=(2, 3, 8))
        labels = r.integers(0, 3, size=2)
        _, l_ske = enc.gpc_terms(Tensor(r.normal(size=(2, 8))), Tensor(frames), labels,
                                 GraphPrototypeBank(protos))
        w1, b1 = enc.gpc_f1.weight.data, enc.gpc_f1.bias.data
        w2, b2 = enc.gpc_f2.weight.data, enc.gpc_f2.bias.data
        projected = [[sum(protos[k, a] * w2[a, c] for a in range(8)) + b2[c] for c in range(8)] for k in range(3)]
        expected = 0.0
        for i in range(2):
            for t in range(3):
                f = [sum(frames[i, t, a] * w1[a, c] for a in range(8)) + b1[c] for c in range(8)]
                logits = [sum(f[c] * projected[k][c] for c in range(8)) / 0.25 for k in range(3)]
                expected -= logits[labels[i]] - math.log(sum(math.exp(v) for v in logits))
        assert l_ske.item() == pytest.approx(expected / 6, abs=1e-9)


def test_masked_joints_keep_their_positions():
    enc = _encoder(graph=SkeletonGraph.human36m())
    joints = np.random.default_rng(13).normal(size=(1, 1, 17, 3))
    mask = np.zeros((1, 1, 17), dtype=bool)
    mask[0, 0, [2, 9, 15]] = True
    h = enc._prompted(joints, mask, enc.structure_prompt).data
    position = enc.fc_pos(Tensor(enc.pe)).data
    for j in (2, 9, 15):
        assert np.allclose(h[0, j], enc.structure_prompt.data + position[j])
    pred = enc.structure_reconstruction(joints, mask).data[0, 0]
    assert not np.allclose(pred[2], pred[9])
    assert not np.allclose(pred[9], pred[15])
    unmasked = enc._prompted(joints, np.zeros_like(mask), enc.structure_prompt)
    assert np.allclose(unmasked.data, enc.graph_embed(joints.reshape(1, 17, 3)).data)


def test_exact_reconstruction_gives_zero_loss(monkeypatch):
    enc = _encoder(mask_ratio=0.4)
    joints = np.random.default_rng(14).normal(size=(2, 4, 5, 3))
    monkeypatch.setattr(enc, "structure_reconstruction", lambda x, mask: Tensor(x))
    monkeypatch.setattr(enc, "trajectory_reconstruction", lambda x, mask: Tensor(np.transpose(x, (0, 2, 1, 3))))
    assert enc.stpr_loss(joints, np.random.default_rng(15)).item() == 0.0


def test_structure_only_loss_ignores_trajectory_head():
    enc = _encoder(stpr_beta=1.0, mask_ratio=0.4)
    joints = np.random.default_rng(16).normal(size=(2, 4, 5, 3))
    before = enc.stpr_loss(joints, np.random.default_rng(17)).item()
    enc.trajectory_head.weight.data = enc.trajectory_head.weight.data + 3.0
    enc.trajectory_prompt.data = enc.trajectory_prompt.data - 1.0
    assert enc.stpr_loss(joints, np.random.default_rng(17)).item() == before
