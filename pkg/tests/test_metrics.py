import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mufasa.errors import DimensionError, UndefinedInputError, UnsupportedError
from mufasa.metrics import (
    GroundTruth, MetricsReport, adjusted_rand_index, fg_ari, image_metrics, iou_matrix,
    label_map_from_attention, mbo_metric, miou_metric,
)

from oracles import argmax_scan, ari_pairs, mbo_bruteforce, miou_bruteforce

label_maps = arrays(np.int64, (6, 6), elements=st.integers(0, 3))


def test_label_map_single_slot_is_zero():
    mask = np.ones((16, 1))
    assert (label_map_from_attention(mask, (4, 4), (16, 16)) == 0).all()


def test_label_map_native_resolution_matches_row_scan():
    rng = np.random.default_rng(3)
    mask = rng.random((20, 4))
    labels = label_map_from_attention(mask, (4, 5), (4, 5))
    expected = np.array([argmax_scan(row) for row in mask]).reshape(4, 5)
    np.testing.assert_array_equal(labels, expected)


def test_label_map_constant_channels_tie_to_first():
    mask = np.full((9, 3), 1.0 / 3)
    assert (label_map_from_attention(mask, (3, 3), (12, 12)) == 0).all()


def test_label_map_checks_grid():
    with pytest.raises(DimensionError):
        label_map_from_attention(np.ones((10, 2)), (3, 3), (6, 6))


def test_label_map_upsampling_follows_blocks():
    # a 2x2 grid with one slot per quadrant upsamples to four clean quadrants
    mask = np.eye(4)
    labels = label_map_from_attention(mask, (2, 2), (8, 8))
    assert (labels[:4, :4] == 0).all() and (labels[4:, 4:] == 3).all()


def test_miou_identity():
    gt = np.array([[0, 0, 1], [2, 2, 1], [2, 0, 1]])
    assert miou_metric(gt, gt) == 1.0


def test_miou_half_split_single_prediction():
    gt = np.zeros((4, 4), dtype=int)
    gt[:, 2:] = 1
    pred = np.zeros((4, 4), dtype=int)
    assert miou_metric(pred, gt) == pytest.approx(0.25, abs=1e-12)


def test_miou_no_segments():
    gt = np.full((3, 3), -1)
    with pytest.raises(UndefinedInputError):
        miou_metric(np.zeros((3, 3), dtype=int), gt)
    with pytest.raises(UndefinedInputError):
        miou_metric(np.zeros((3, 3), dtype=int), np.zeros((3, 3), dtype=int), include_background=False)


def test_miou_matches_exhaustive_on_8x8():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gt = rng.integers(0, rng.integers(1, 5), size=(8, 8))
        pred = rng.integers(0, rng.integers(1, 5), size=(8, 8))
        assert miou_metric(pred, gt) == pytest.approx(miou_bruteforce(pred, gt), abs=1e-12)


def test_ignore_pixels_are_excluded():
    gt = np.array([[0, 1], [-1, -1]])
    pred = np.array([[0, 1], [1, 0]])
    assert miou_metric(pred, gt) == 1.0
    assert mbo_metric(pred, gt) == 1.0


def test_mbo_identity_and_class_level():
    inst = np.array([[0, 1, 1], [0, 2, 2], [0, 0, 3]])
    cls = np.array([[0, 1, 1], [0, 1, 1], [0, 0, 2]])
    gt = GroundTruth(inst, cls)
    assert mbo_metric(inst, gt, "instance") == 1.0
    assert mbo_metric(cls, gt, "class") == 1.0
    with pytest.raises(UnsupportedError):
        mbo_metric(inst, GroundTruth(inst), "class")


def test_mbo_matches_nested_loop():
    rng = np.random.default_rng(1)
    for _ in range(200):
        gt = rng.integers(0, 4, size=(7, 5))
        pred = rng.integers(0, 5, size=(7, 5))
        assert mbo_metric(pred, gt) == pytest.approx(mbo_bruteforce(pred, gt), abs=1e-12)
        assert mbo_metric(pred, gt, include_background=False) == pytest.approx(
            mbo_bruteforce(pred, gt, include_background=False), abs=1e-12
        )


def test_fg_ari_identity_and_relabeling():
    gt = np.array([[0, 1, 1], [2, 2, 0], [3, 3, 3]])
    assert fg_ari(gt, gt) == 1.0
    relabeled = np.choose(gt, [7, 4, 9, 1])
    assert fg_ari(relabeled, gt) == pytest.approx(1.0)


def test_fg_ari_ignores_background_pixels():
    gt = np.array([[0, 1], [0, 2]])
    pred = np.array([[5, 1], [6, 2]])
    assert fg_ari(pred, gt) == 1.0


def test_fg_ari_single_cluster_both():
    gt = np.array([[0, 1], [1, 1]])
    assert fg_ari(np.zeros((2, 2), dtype=int), gt) == 1.0


def test_fg_ari_needs_foreground():
    with pytest.raises(UndefinedInputError):
        fg_ari(np.zeros((3, 3), dtype=int), np.zeros((3, 3), dtype=int))


def test_fg_ari_matches_pair_enumeration_on_6x6():
    rng = np.random.default_rng(2)
    for _ in range(200):
        gt = rng.integers(0, 4, size=(6, 6))
        if not (gt != 0).any():
            continue
        pred = rng.integers(0, 4, size=(6, 6))
        assert fg_ari(pred, gt) == pytest.approx(ari_pairs(pred, gt), abs=1e-9)


def test_fg_ari_random_labelings_center_on_zero():
    rng = np.random.default_rng(4)
    values = [fg_ari(rng.integers(0, 4, size=(32, 32)), rng.integers(0, 4, size=(32, 32))) for _ in range(1000)]
    assert abs(np.mean(values)) < 0.05


def test_ari_range():
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = adjusted_rand_index(rng.integers(0, 3, 20), rng.integers(0, 3, 20))
        assert -0.5 - 1e-12 <= v <= 1.0 + 1e-12


@settings(max_examples=60, deadline=None)
@given(label_maps, label_maps, st.permutations(list(range(4))))
def test_metrics_invariant_to_prediction_relabeling(pred, gt, perm):
    relabeled = np.asarray(perm)[pred]
    g = GroundTruth(gt)
    if not (gt != 0).any():
        return
    a, b = image_metrics(pred, g), image_metrics(relabeled, g)
    for key in a:
        assert a[key] == pytest.approx(b[key], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(label_maps, label_maps)
def test_miou_never_exceeds_mbo(pred, gt):
    assert miou_metric(pred, gt) <= mbo_metric(pred, gt) + 1e-12


def test_iou_matrix_shape_check():
    with pytest.raises(DimensionError):
        iou_matrix(np.zeros((2, 2)), np.zeros((3, 3)))


def test_report_maxima_and_serialisation():
    report = MetricsReport.from_samples({
        "slot": [{"miou": 0.5, "mbo_i": 0.25, "fg_ari": 0.1}, {"miou": 0.7, "mbo_i": 0.75, "fg_ari": 0.3}],
        "decoder": [{"miou": 0.4, "mbo_i": 0.9, "fg_ari": 0.2}, {"miou": 0.4, "mbo_i": 0.9, "fg_ari": 0.2}],
    })
    assert report.n_samples == 2
    for metric, row in report.values.items():
        assert row["max"] == max(row["slot"], row["decoder"])
    assert report.get("miou", "slot") == pytest.approx(0.6)
    assert report.get("mbo_i") == pytest.approx(0.9)
    assert "mbo_i.max = 0.900000" in report.to_text()
    assert json.loads(report.to_json())["metrics"]["miou"]["decoder"] == pytest.approx(0.4)
