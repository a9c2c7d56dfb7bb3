import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dae_refine import datagen as D
from dae_refine import segmenter as S
from dae_refine import tensor as T
from dae_refine.metrics import confusion, global_accuracy, iou_per_class, mean_iou
from dae_refine.optim import TrainSchedule


def test_forward_shapes_and_simplex():
    model = S.SegmenterModel.init(S.SegmenterConfig(), seed=0)
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    out = S.forward(model, x)
    assert out.y.shape == (2, 5, 32, 32)
    assert out.h.shape == (2, *model.config.h_shape) == (2, 32, 8, 8)
    assert np.max(np.abs(out.y.data.sum(axis=1) - 1)) < 1e-12
    np.testing.assert_array_equal(S.forward(model, x).y.data, out.y.data)


def test_zero_head_gives_uniform_output():
    model = S.SegmenterModel.init(S.SegmenterConfig(zero_init_head=True), seed=0)
    y = S.forward(model, np.random.default_rng(1).random((1, 3, 32, 32))).y.data
    np.testing.assert_allclose(y, 0.2, atol=1e-15)


def test_shape_mismatch():
    model = S.SegmenterModel.init(S.SegmenterConfig(), seed=0)
    with pytest.raises(T.ShapeError):
        S.forward(model, np.zeros((1, 3, 16, 16)))


def test_tap_stage_shapes():
    for stage, shape in ((1, (16, 16, 16)), (3, (64, 4, 4))):
        model = S.SegmenterModel.init(S.SegmenterConfig(tap_stage=stage), seed=0)
        assert S.forward(model, np.zeros((1, 3, 32, 32))).h.shape[1:] == shape


def test_predict_argmax_rules():
    lab = np.random.default_rng(0).integers(0, 5, (4, 6))
    np.testing.assert_array_equal(S.predict_argmax(D.one_hot(lab, 5)), lab)
    assert not S.predict_argmax(np.full((5, 3, 3), 0.2)).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_predict_argmax_matches_scan(seed):
    y = np.random.default_rng(seed).integers(0, 3, (4, 3, 5)).astype(float)
    expect = np.zeros((3, 5), int)
    for i in range(3):
        for j in range(5):
            best = -np.inf
            for k in range(4):
                if y[k, i, j] > best:
                    best, expect[i, j] = y[k, i, j], k
    np.testing.assert_array_equal(S.predict_argmax(y), expect)


def test_checkpoint_roundtrip(tmp_path):
    model = S.SegmenterModel.init(S.SegmenterConfig(), seed=4)
    model.save(tmp_path)
    back = S.SegmenterModel.load(tmp_path)
    assert back.config == model.config
    x = np.random.default_rng(0).random((1, 3, 32, 32))
    np.testing.assert_array_equal(S.forward(back, x).y.data, S.forward(model, x).y.data)


def test_trained_beats_majority_baseline(tiny_corpus, tiny_segmenter):
    _, _, test = tiny_corpus
    cm = S.evaluate(tiny_segmenter, test)
    labels = np.stack([s.label for s in test])
    majority = confusion(labels, np.zeros_like(labels), 5)
    assert mean_iou(cm) > mean_iou(majority)
    assert tiny_segmenter.history["val_mean_iou"] > 0


def test_noise_free_corpus_is_learned():
    spec = D.CorpusSpec(n_train=40, n_val=20, n_test=1, noise_level=0.0, structure_rate=0.0, seed=2)
    train, val, _ = D.generate(spec)
    model = S.SegmenterModel.init(S.SegmenterConfig(), seed=0)
    S.train_segmenter(model, train, val, TrainSchedule(lr0=3e-3, max_epochs=25, patience_epochs=25), seed=0)
    assert global_accuracy(S.evaluate(model, val)) > 0.98


def test_training_is_reproducible(tiny_corpus):
    train, val, _ = tiny_corpus
    losses = []
    for _ in range(2):
        model = S.SegmenterModel.init(S.SegmenterConfig(), seed=1)
        hist = S.train_segmenter(model, train[:20], val[:5], TrainSchedule(max_epochs=2), seed=2)
        losses.append(hist.val_loss[-1])
    assert losses[0] == losses[1]
