import math

import numpy as np
import pytest

from src.errors import ConfigurationError, DataError, ShapeError
from src.sgtm import (SKELETON_MESSAGE, SKELETON_TOKEN, TEST, TRAIN, VISUAL_MESSAGE, VISUAL_TOKEN,
                      AuxiliaryTemporalDistillation, FrameClassifier, SkeletonGuidedTemporalModel,
                      TypeEmbeddingTable, UnifiedTokenSequence, assemble, atd, frame_logits_and_loss,
                      token_types)
from src.tensor import Tensor

B, FRAMES, LV, LS, C = 2, 3, 4, 3, 8


def _tokens(seed):
    r = np.random.default_rng(seed)
    return Tensor(r.normal(size=(B, FRAMES, LV, C))), Tensor(r.normal(size=(B, FRAMES, LS, C)))


def test_token_type_layout():
    assert token_types(3, 2, TRAIN).tolist() == [VISUAL_TOKEN] * 3 + [VISUAL_MESSAGE] + [SKELETON_TOKEN] * 2 + [
        SKELETON_MESSAGE]
    assert token_types(3, 2, TEST).tolist() == [VISUAL_TOKEN] * 3 + [VISUAL_MESSAGE]


def test_fresh_distillation_is_identity():
    r = np.random.default_rng(0)
    m_vis, m_ske = r.normal(size=(B, FRAMES, C)), r.normal(size=(B, FRAMES, C))
    out = atd(Tensor(m_vis), Tensor(m_ske), AuxiliaryTemporalDistillation(C, 2, r))
    assert np.array_equal(out.data, m_vis)


def test_trained_distillation_reads_skeleton_messages():
    r = np.random.default_rng(1)
    module = AuxiliaryTemporalDistillation(C, 2, r, zero_init=False)
    m_vis = Tensor(r.normal(size=(1, FRAMES, C)))
    a = atd(m_vis, Tensor(r.normal(size=(1, FRAMES, C))), module).data
    b = atd(m_vis, Tensor(r.normal(size=(1, FRAMES, C))), module).data
    assert not np.allclose(a, b)
    with pytest.raises(ShapeError):
        atd(m_vis, Tensor(np.zeros((1, FRAMES + 1, C))), module)


def test_assemble_adds_type_embeddings():
    table = TypeEmbeddingTable(C, np.random.default_rng(2))
    zeros = Tensor(np.zeros((B, FRAMES, LV, C)))
    x = assemble(zeros, Tensor(np.zeros((B, FRAMES, C))), Tensor(np.zeros((B, FRAMES, LS, C))),
                 Tensor(np.zeros((B, FRAMES, C))), table, TRAIN)
    assert x.tokens.shape == (B * FRAMES, LV + 1 + LS + 1, C)
    assert x.length == LV + LS + 2
    assert np.allclose(x.tokens.data[0], table.weight.data[x.types])


def test_assemble_modes_validated():
    table = TypeEmbeddingTable(C, np.random.default_rng(3))
    vis, _ = _tokens(4)
    m_vis = Tensor(np.zeros((B, FRAMES, C)))
    with pytest.raises(DataError):
        assemble(vis, m_vis, None, None, table, TRAIN)
    with pytest.raises(ConfigurationError):
        assemble(vis, m_vis, None, None, table, "eval")
    assert assemble(vis, m_vis, None, None, table, TEST).length == LV + 1


@pytest.mark.parametrize("seed", range(100))
def test_frame_loss_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    classifier = FrameClassifier(C, 4, r)
    tokens = r.normal(size=(B * FRAMES, 5, C))
    labels = r.integers(0, 4, size=B)
    x = UnifiedTokenSequence(Tensor(tokens), np.zeros(5, dtype=np.int64), TRAIN, B, FRAMES)
    z, loss = frame_logits_and_loss(x, classifier, labels)
    assert z.shape == (B, FRAMES, C)

    w, bias, q = classifier.classifier.weight.data, classifier.classifier.bias.data, classifier.query.data
    expected = 0.0
    for n in range(B * FRAMES):
        scores = [float(tokens[n, l] @ q) for l in range(5)]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        pooled = sum(weights[l] * tokens[n, l] for l in range(5)) / sum(weights)
        assert np.allclose(z.data.reshape(-1, C)[n], pooled)
        logits = pooled @ w + bias
        label = labels[n // FRAMES]
        expected -= logits[label] - math.log(sum(math.exp(v) for v in logits))
    assert loss.item() == pytest.approx(expected / (B * FRAMES), rel=1e-9)


def test_frame_loss_rejects_unknown_labels():
    classifier = FrameClassifier(C, 2, np.random.default_rng(6))
    x = UnifiedTokenSequence(Tensor(np.zeros((B * FRAMES, 3, C))), np.zeros(3, dtype=np.int64), TRAIN, B, FRAMES)
    with pytest.raises(DataError):
        frame_logits_and_loss(x, classifier, np.array([0, 2]))
    with pytest.raises(ShapeError):
        frame_logits_and_loss(x, classifier, np.array([0]))


def test_features_ignore_skeleton_input():
    model = SkeletonGuidedTemporalModel(C, 2, 4, np.random.default_rng(7))
    vis, ske = _tokens(8)
    without = model.features(vis).data
    assert without.shape == (B, C)
    assert np.array_equal(model.features(vis, ske).data, without)
    assert np.array_equal(model.features(vis, Tensor(np.zeros(ske.shape))).data, without)


def test_training_loss_with_and_without_distillation():
    model = SkeletonGuidedTemporalModel(C, 2, 4, np.random.default_rng(9))
    vis, ske = _tokens(10)
    labels = np.array([0, 3])
    loss, z = model.training_loss(vis, ske, labels)
    assert z.shape == (B, FRAMES, C)
    assert np.isfinite(loss.item())
    loss.backward()
    assert model.mte_ske.proj.weight.grad is not None
    # the fresh distillation is the identity, so skipping it changes nothing
    plain, _ = model.training_loss(vis, ske, labels, use_atd=False)
    assert plain.item() == pytest.approx(loss.item(), rel=1e-12)
