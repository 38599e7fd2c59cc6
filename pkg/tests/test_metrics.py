import numpy as np
import pytest

from lesionlab.metrics import (
    LesionMetrics,
    Matching,
    aggregate,
    category_stats,
    dice,
    evaluate_case,
    evaluate_set,
    is_mini_lesion_case,
    lesionwise_counts,
)
from oracles import bfs_components, brute_counts, random_mask


def three_lesions():
    m = np.zeros((20, 20, 20), bool)
    m[1:3, 1:3, 1:3] = True
    m[10:14, 10:14, 10:14] = True
    m[1, 15, 15] = True
    return m


def test_dice_conventions():
    m = three_lesions()
    assert dice(m, m) == 1.0
    other = np.zeros_like(m)
    other[18, 18, 18] = True
    assert dice(m, other) == 0.0
    empty = np.zeros_like(m)
    assert dice(empty, empty) == 1.0
    assert dice(empty, m) == 0.0
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, :2] = True
    b[0, 0, 1:3] = True
    assert dice(a, b) == 0.5
    assert dice(a, b) == dice(b, a)
    with pytest.raises(ValueError):
        dice(a, np.zeros((4, 4, 5), bool))


def test_perfect_prediction_counts():
    m = three_lesions()
    assert lesionwise_counts(m, m) == (3, 0, 0)
    r = evaluate_case(m, m)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_spurious_component_is_false_positive():
    m = three_lesions()
    pred = m.copy()
    pred[18, 2, 18] = True
    assert lesionwise_counts(pred, m) == (3, 1, 0)


def test_blob_spanning_two_lesions():
    gt = np.zeros((10, 3, 3), bool)
    gt[1, 1, 1] = gt[3, 1, 1] = True
    pred = np.zeros_like(gt)
    pred[1:4, 1, 1] = True
    assert lesionwise_counts(pred, gt) == (2, 0, 0)
    assert lesionwise_counts(pred, gt, matching=Matching.ONE_TO_ONE) == (1, 0, 1)
    assert lesionwise_counts(pred, gt, matching="one-to-one") == (1, 0, 1)


def test_from_counts_conventions():
    m = LesionMetrics.from_counts(1.0, 0, 0, 0)
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
    m = LesionMetrics.from_counts(0.0, 0, 2, 3)
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    m = LesionMetrics.from_counts(0.5, 1, 1, 3)
    assert m.precision == 0.5 and m.recall == 0.25
    assert m.f1 == pytest.approx(2 * 0.5 * 0.25 / 0.75)


@pytest.mark.parametrize("conn", [6, 26])
def test_counts_match_oracle(conn):
    rng = np.random.default_rng(conn)
    for _ in range(25):
        shape = tuple(rng.integers(4, 13, size=3))
        pred = rng.random(shape) < 0.15
        gt = rng.random(shape) < 0.15
        tp, fp, fn = lesionwise_counts(pred, gt, conn)
        assert (tp, fp, fn) == brute_counts(pred, gt, conn)
        assert tp + fn == len(bfs_components(gt, conn))
        assert fp <= len(bfs_components(pred, conn))


def test_one_to_one_never_exceeds_any_overlap():
    rng = np.random.default_rng(9)
    for _ in range(20):
        pred = random_mask(rng, 10, density=0.2)
        gt = rng.random(pred.shape) < 0.2
        a = lesionwise_counts(pred, gt)
        b = lesionwise_counts(pred, gt, matching=Matching.ONE_TO_ONE)
        assert b[0] <= a[0] and b[0] + b[2] == a[0] + a[2]


def test_metric_degradation():
    gt = three_lesions()
    pred = gt.copy()
    base = evaluate_case(pred, gt)
    dropped = pred.copy()
    dropped[10:14, 10:14, 10:14] = False
    assert evaluate_case(dropped, gt).recall <= base.recall
    noisy = pred.copy()
    noisy[18, 2, 18] = True
    assert evaluate_case(noisy, gt).precision <= base.precision


def test_mini_lesion_filter():
    small = np.zeros((30, 30, 30), bool)
    small[:9, :10, :10] = True  # 900 voxels
    big = np.zeros_like(small)
    big[:10, :10, :10] = True  # 1000 voxels
    empty = np.zeros_like(small)
    assert is_mini_lesion_case(small)
    assert not is_mini_lesion_case(big)
    assert is_mini_lesion_case(empty)


def test_evaluate_set_aggregates():
    m = three_lesions()
    empty = np.zeros_like(m)
    report = evaluate_set([("b", empty, m), ("a", m, m)])
    assert [r.case_id for r in report.cases] == ["a", "b"]
    agg = report.aggregates["all"]
    assert agg["dice"] == 0.5
    assert agg["recall"] == 0.5
    assert agg["n_cases"] == 2
    # three_lesions has no lesion of 1000 voxels or more
    assert report.aggregates["mini"]["n_cases"] == 2


def test_evaluate_set_mini_filter_and_mean():
    rng = np.random.default_rng(11)
    cases = []
    expected_mini = set()
    for i in range(8):
        gt = np.zeros((24, 24, 24), bool)
        side = int(rng.integers(3, 13))
        gt[2:2 + side, 2:2 + side, 2:2 + side] = True
        if side ** 3 < 1000:
            expected_mini.add(f"c{i}")
        pred = np.roll(gt, int(rng.integers(0, 3)), axis=0)
        cases.append((f"c{i}", pred, gt))
    report = evaluate_set(cases)
    assert {r.case_id for r in report.cases if r.mini} == expected_mini
    per_case = [evaluate_case(p, g) for _, p, g in sorted(cases, key=lambda c: c[0])]
    for name in ("dice", "precision", "recall", "f1"):
        assert report.aggregates["all"][name] == sum(getattr(m, name) for m in per_case) / 8
    mini = evaluate_set(cases, mini_only=True)
    assert {r.case_id for r in mini.cases} == expected_mini


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        evaluate_set([])
    with pytest.raises(ValueError):
        aggregate([])


def test_category_stats_msl():
    m = np.zeros((20, 20, 20), bool)
    m[:9, :11, 0] = True  # 99 voxels
    stats = category_stats([m])
    assert dict(zip(stats.names, stats.lesion_counts.tolist())) == {
        "tiny": 1, "small": 0, "medium": 0, "large": 0}
    assert stats.voxel_counts.sum() == 99


def test_category_stats_dbl():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    stats = category_stats([m, np.zeros_like(m)], strategy="dbl")
    assert stats.lesion_counts is None
    assert stats.voxel_counts.tolist() == [27, 0]
    assert stats.mean_voxels_per_scan.tolist() == [13.5, 0.0]
    rows = list(stats.rows())
    assert rows[0]["category"] == "boundary" and rows[0]["voxels"] == 27


def test_category_stats_totals_conserved():
    rng = np.random.default_rng(12)
    masks = [rng.random((15, 15, 15)) < 0.3 for _ in range(3)]
    stats = category_stats(masks, conn=6)
    assert stats.voxel_counts.sum() == sum(m.sum() for m in masks)
    assert stats.lesion_counts.sum() == sum(len(bfs_components(m, 6)) for m in masks)
    empty = category_stats([np.zeros((4, 4, 4), bool)])
    assert empty.voxel_counts.sum() == 0 and empty.lesion_counts.sum() == 0
    with pytest.raises(ValueError):
        category_stats([])
