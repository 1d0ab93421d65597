import numpy as np
import pytest

from fusion_detect.detection.anchors import (IGNORE, NEGATIVE, POSITIVE, AnchorSet, assign_targets,
                                             estimate_anchors, generate_anchors, kmeans_iou,
                                             read_anchor_file, shape_iou, write_anchor_file)
from fusion_detect.detection.boxes import iou_matrix
from fusion_detect.errors import ContractError, DimensionError, ValidationError
from oracles import two_partition_centroids


def _boxes(shapes):
    return np.array([[0, 0, w, h] for w, h in shapes], dtype=float)


def test_k1_identical_boxes():
    anchors, miou = estimate_anchors(_boxes([(12, 7)] * 6), 1)
    assert anchors.shapes == ((12.0, 7.0),)
    assert miou == pytest.approx(1.0)


def test_k_equals_distinct_reaches_iou_one():
    rng = np.random.default_rng(0)
    for trial in range(20):
        distinct = {(int(w), int(h)) for w, h in rng.integers(4, 60, size=(6, 2))}
        shapes = [s for s in distinct for _ in range(int(rng.integers(1, 4)))]
        anchors, miou = estimate_anchors(_boxes(shapes), len(distinct), seed=trial)
        assert miou == pytest.approx(1.0, abs=1e-12)
        assert set(anchors.shapes) == {(float(w), float(h)) for w, h in distinct}


def test_objective_monotone_non_increasing():
    rng = np.random.default_rng(1)
    for seed in range(30):
        shapes = rng.uniform(5, 80, size=(60, 2))
        res = kmeans_iou(shapes, int(rng.integers(2, 7)), np.random.default_rng(seed))
        diffs = np.diff(res.objective)
        assert np.all(diffs <= 1e-15), res.objective


def test_two_cluster_oracle():
    shapes = [(10, 10)] * 5 + [(40, 20)] * 5
    anchors, _ = estimate_anchors(_boxes(shapes), 2, seed=3)
    assert set(anchors.shapes) == {(10.0, 10.0), (40.0, 20.0)}
    assert set(anchors.shapes) == two_partition_centroids(shapes)


def test_sorted_by_area_and_deterministic():
    rng = np.random.default_rng(2)
    boxes = np.column_stack([np.zeros((80, 2)), rng.uniform(5, 60, size=(80, 2))])
    a1, m1 = estimate_anchors(boxes, 4, seed=9)
    a2, m2 = estimate_anchors(boxes, 4, seed=9)
    assert a1 == a2 and m1 == m2
    areas = [w * h for w, h in a1.shapes]
    assert areas == sorted(areas)


def test_estimate_errors():
    with pytest.raises(ContractError):
        estimate_anchors(np.zeros((0, 4)), 1)
    with pytest.raises(ContractError):
        estimate_anchors(_boxes([(3, 3)]), 0)
    with pytest.raises(ContractError):
        estimate_anchors(_boxes([(3, 3), (3, 3)]), 2)


def test_shape_iou_origin_aligned():
    v = shape_iou(np.array([[2.0, 2.0]]), np.array([[1.0, 4.0]]))[0, 0]
    assert v == pytest.approx(2 / 6)


# ---------------------------------------------------------------- tiling

def test_generate_single_anchor():
    out = generate_anchors(AnchorSet(((10, 6),), stride=32), (1, 1), (32, 32))
    np.testing.assert_array_equal(out, [[16 - 5, 16 - 3, 10, 6]])


def test_generate_count_and_grid():
    anchors = AnchorSet(((8, 8), (16, 8), (8, 16)), stride=16)
    out = generate_anchors(anchors, (2, 2), (32, 32))
    assert out.shape == (12, 4)
    centres = out[:, :2] + out[:, 2:] / 2
    expected = [((j + 0.5) * 16, (i + 0.5) * 16) for i in range(2) for j in range(2) for _ in range(3)]
    np.testing.assert_array_equal(centres, expected)


def test_generate_dims_mismatch():
    with pytest.raises(DimensionError):
        generate_anchors(AnchorSet(((8, 8),)), (2, 2), (64, 32))


def test_anchor_set_validation():
    with pytest.raises(ContractError):
        AnchorSet(())
    with pytest.raises(ContractError):
        AnchorSet(((3, 0),))


# ---------------------------------------------------------------- assignment

def _box_with_iou(target):
    # a 10x10 box shifted right by d overlaps (0, 0, 10, 10) with IoU (10 - d) / (10 + d)
    d = 10 * (1 - target) / (1 + target)
    return [d, 0, 10, 10]


@pytest.mark.parametrize("overlap,label", [(0.7, POSITIVE), (0.6, POSITIVE), (1.0, POSITIVE),
                                           (0.2, NEGATIVE), (0.29, NEGATIVE), (0.0, NEGATIVE),
                                           (0.45, IGNORE)])
def test_assign_bands(overlap, label):
    boxes = np.array([_box_with_iou(overlap) if overlap > 0 else [50, 50, 10, 10]])
    labels, matched = assign_targets(boxes, np.array([[0, 0, 10, 10]]))
    assert labels[0] == label and matched[0] == 0


def test_assign_no_gt_all_negative():
    labels, matched = assign_targets(np.array([[0, 0, 5, 5], [1, 1, 5, 5]]), np.zeros((0, 4)))
    assert labels.tolist() == [NEGATIVE, NEGATIVE] and matched.tolist() == [-1, -1]


def test_assign_ties_lowest_gt_index():
    _, matched = assign_targets(np.array([[0, 0, 10, 10]]), np.array([[0, 0, 10, 10], [0, 0, 10, 10]]))
    assert matched[0] == 0


def test_forced_positive_and_partition():
    rng = np.random.default_rng(5)
    for _ in range(200):
        boxes = np.column_stack([rng.uniform(0, 50, (30, 2)), rng.uniform(3, 25, (30, 2))])
        gt = np.column_stack([rng.uniform(0, 50, (3, 2)), rng.uniform(3, 25, (3, 2))])
        labels, matched = assign_targets(boxes, gt, force_best=True)
        assert set(np.unique(labels)) <= {POSITIVE, NEGATIVE, IGNORE}
        ious = iou_matrix(boxes, gt)
        for j in range(len(gt)):
            if ious[:, j].max() > 0:
                assert np.any((labels == POSITIVE) & (ious[:, j] > 0))


def test_shared_best_anchor_serves_both_gts():
    # box 0 is the best match for both gts; the second gt falls back to box 1
    boxes = np.array([[0, 0, 10, 10], [4, 0, 10, 10], [60, 60, 5, 5]], dtype=float)
    gt = np.array([[0, 0, 10, 10], [1, 0, 10, 10]], dtype=float)
    labels, matched = assign_targets(boxes, gt, positive_band=(0.95, 1.0), force_best=True)
    assert labels.tolist() == [POSITIVE, POSITIVE, NEGATIVE]
    assert matched[:2].tolist() == [0, 1]


# ---------------------------------------------------------------- anchor file

def test_anchor_file_round_trip(tmp_path):
    a = AnchorSet(((12.5, 7.0), (1 / 3, 40.0)), stride=32)
    write_anchor_file(a, tmp_path / "anchors.txt")
    assert read_anchor_file(tmp_path / "anchors.txt") == a
    lines = (tmp_path / "anchors.txt").read_text().splitlines()
    assert len(lines) == 2 and all(len(line.split()) == 2 for line in lines)


def test_anchor_file_bad_line(tmp_path):
    (tmp_path / "a.txt").write_text("1 2 3\n")
    with pytest.raises(ValidationError):
        read_anchor_file(tmp_path / "a.txt")
