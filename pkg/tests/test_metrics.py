import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dae_refine.metrics import ConfusionMatrix, confusion, global_accuracy, iou_per_class, mean_iou, write_report


def test_identical_maps_are_diagonal():
    lab = np.random.default_rng(0).integers(0, 4, size=(5, 6))
    cm = confusion(lab, lab, 4)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert cm.total == lab.size
    assert global_accuracy(cm) == 1.0
    present = np.unique(lab)
    np.testing.assert_array_equal(iou_per_class(cm)[present], 1.0)


def test_hand_filled_two_by_two():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    np.testing.assert_array_equal(confusion(truth, pred, 2).counts, [[1, 1], [0, 2]])


def test_hand_computed_scores():
    cm = ConfusionMatrix(2, np.array([[3, 1], [2, 4]]))
    iou = iou_per_class(cm)
    assert iou[0] == pytest.approx(0.5)
    assert iou[1] == pytest.approx(4 / 7)
    assert mean_iou(cm) == pytest.approx((0.5 + 4 / 7) / 2)
    assert mean_iou(cm) == pytest.approx(0.5357, abs=1e-4)
    assert global_accuracy(cm) == pytest.approx(0.7)


def test_disjoint_masks_zero_iou():
    truth = np.array([[1, 1, 0, 0]])
    pred = 1 - truth
    assert np.all(iou_per_class(confusion(truth, pred, 2)) == 0)


def test_absent_class_is_excluded():
    truth = np.array([0, 0, 1, 1])
    cm = confusion(truth, truth, 3)
    assert np.isnan(iou_per_class(cm)[2])
    assert mean_iou(cm) == 1.0
    # predicted but never true: counted as 0 IoU yet excluded from the mean
    cm = confusion(np.array([0, 0]), np.array([0, 1]), 2)
    assert iou_per_class(cm)[1] == 0.0
    assert mean_iou(cm) == pytest.approx(0.5)


def test_accumulate_errors():
    with pytest.raises(ValueError):
        confusion(np.zeros(3, int), np.zeros(4, int), 2)
    with pytest.raises(ValueError):
        confusion(np.array([0, 2]), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        confusion(np.array([0, -1]), np.array([0, 1]), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_order_independent_and_merge(seed):
    rng = np.random.default_rng(seed)
    maps = [(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))) for _ in range(4)]
    a, b = ConfusionMatrix(3), ConfusionMatrix(3)
    for t, p in maps:
        a.accumulate(t, p)
    for t, p in reversed(maps):
        b.accumulate(t, p)
    np.testing.assert_array_equal(a.counts, b.counts)
    halves = confusion(*maps[0], 3).merge(confusion(*maps[1], 3))
    np.testing.assert_array_equal(halves.counts, confusion(*maps[1], 3).accumulate(*maps[0]).counts)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    k = 4
    truth, pred = rng.integers(0, k, (6, 6)), rng.integers(0, k, (6, 6))
    perm = rng.permutation(k)
    cm, cm_p = confusion(truth, pred, k), confusion(perm[truth], perm[pred], k)
    iou, iou_p = iou_per_class(cm), iou_per_class(cm_p)
    np.testing.assert_allclose(iou_p[perm], iou, equal_nan=True)
    assert mean_iou(cm_p) == pytest.approx(mean_iou(cm))
    assert global_accuracy(cm_p) == global_accuracy(cm)
    assert np.all((iou[~np.isnan(iou)] >= 0) & (iou[~np.isnan(iou)] <= 1))


def test_report_layout(tmp_path):
    cm = ConfusionMatrix(2, np.array([[3, 1], [2, 4]]))
    path = tmp_path / "r.csv"
    write_report(path, [("feedforward", cm)], ["a", "b"])
    assert path.read_text() == "model,a,b,mean_iou,global_accuracy\nfeedforward,50.00,57.14,53.57,70.00\n"
