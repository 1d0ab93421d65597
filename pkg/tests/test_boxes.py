import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusion_detect.detection.boxes import (Box, clip_boxes, decode_deltas, encode_deltas, iou,
                                           iou_matrix, nms)
from fusion_detect.errors import ContractError
from oracles import brute_nms, exhaustive_nms_cases, raster_iou


def test_box_derived_fields_and_validation():
    b = Box(1, 2, 4, 2)
    assert b.area == 8 and b.aspect_ratio == 2
    with pytest.raises(ContractError):
        Box(0, 0, 0, 3)
    with pytest.raises(ContractError):
        Box(0, 0, 3, -1)


def test_iou_fixtures():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 1, 1)) == 0.0
    assert iou(a, Box(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)
    # touching edges share no area
    assert iou(a, Box(2, 0, 2, 2)) == 0.0


def test_iou_matches_rasterized_counts():
    rng = np.random.default_rng(11)
    a = np.column_stack([rng.integers(0, 20, (1000, 2)), rng.integers(1, 15, (1000, 2))]).astype(float)
    b = np.column_stack([rng.integers(0, 20, (1000, 2)), rng.integers(1, 15, (1000, 2))]).astype(float)
    got = np.array([iou_matrix(x, y)[0, 0] for x, y in zip(a, b)])
    want = np.array([raster_iou(x, y) for x, y in zip(a, b)])
    assert np.max(np.abs(got - want)) <= 1e-6
    assert (want > 0).sum() > 100  # the sample is not all disjoint pairs


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.lists(st.floats(0.1, 40), min_size=2, max_size=2),
       st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.lists(st.floats(0.1, 40), min_size=2, max_size=2))
def test_iou_symmetric_and_bounded(p1, s1, p2, s2):
    a, b = Box(*p1, *s1), Box(*p2, *s2)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == pytest.approx(1.0)


def test_encode_hand_example():
    # anchor centred at (0, 0) with size 10x10, gt centred at (5, 0) with
    # size 20x10: tx = 5/10, ty = 0, tw = ln 2, th = 0
    anchor = np.array([-5, -5, 10, 10])
    gt = np.array([-5, -5, 20, 10])
    t = encode_deltas(anchor, gt)[0]
    np.testing.assert_allclose(t, [0.5, 0.0, math.log(2), 0.0], atol=1e-15)
    # the same numbers read as top-left corners move the gt centre 10 px
    t = encode_deltas(np.array([0, 0, 10, 10]), np.array([5, 0, 20, 10]))[0]
    np.testing.assert_allclose(t, [1.0, 0.0, math.log(2), 0.0], atol=1e-15)
    np.testing.assert_array_equal(encode_deltas(np.array([3, 4, 5, 6]), np.array([3, 4, 5, 6])), [[0, 0, 0, 0]])


def test_encode_decode_round_trip_1000():
    rng = np.random.default_rng(2)
    anchors = np.column_stack([rng.uniform(-20, 80, (1000, 2)), rng.uniform(2, 60, (1000, 2))])
    gt = np.column_stack([rng.uniform(-20, 80, (1000, 2)), rng.uniform(2, 60, (1000, 2))])
    back = decode_deltas(anchors, encode_deltas(anchors, gt))
    rel = np.abs(back - gt) / np.maximum(np.abs(gt), 1.0)
    assert rel.max() <= 1e-6


def test_encode_rejects_bad_sizes():
    with pytest.raises(ContractError):
        encode_deltas(np.array([0, 0, 0, 5]), np.array([0, 0, 3, 3]))
    with pytest.raises(ContractError):
        decode_deltas(np.array([0, 0, -1, 5]), np.zeros(4))


def test_clip_boxes():
    out = clip_boxes(np.array([[-5, -5, 20, 20], [50, 10, 30, 5]]), (40, 60))
    np.testing.assert_array_equal(out, [[0, 0, 15, 15], [50, 10, 10, 5]])


def test_nms_fixtures():
    assert nms(np.array([[0, 0, 4, 4]]), np.array([0.3]), 0.5).tolist() == [0]
    assert nms(np.array([[0, 0, 4, 4], [0, 0, 4, 4]]), np.array([0.9, 0.8]), 0.5).tolist() == [0]
    assert nms(np.zeros((0, 4)), np.zeros(0), 0.5).tolist() == []
    # equal scores: lowest index wins
    assert nms(np.array([[0, 0, 4, 4], [0, 0, 4, 4]]), np.array([0.5, 0.5]), 0.5).tolist() == [0]
    with pytest.raises(ContractError):
        nms(np.zeros((1, 4)), np.zeros(1), 0.0)


@pytest.mark.parametrize("threshold", [0.3, 0.5])
def test_nms_exhaustive_small_inputs(threshold):
    cases = 0
    for boxes, scores in exhaustive_nms_cases(8):
        got = nms(np.array(boxes, dtype=float).reshape(-1, 4), np.array(scores), threshold).tolist()
        assert got == brute_nms(boxes, scores, threshold), (boxes, scores)
        cases += 1
    assert cases == sum(math.comb(16, k) for k in range(9))


def test_nms_random_50_box_cases():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        boxes = np.column_stack([rng.uniform(0, 60, (50, 2)), rng.uniform(4, 30, (50, 2))])
        scores = rng.random(50)
        thr = float(rng.uniform(0.1, 0.9))
        assert nms(boxes, scores, thr).tolist() == brute_nms(boxes.tolist(), scores.tolist(), thr)


def test_nms_independent_of_input_order():
    rng = np.random.default_rng(4)
    boxes = np.column_stack([rng.uniform(0, 30, (30, 2)), rng.uniform(4, 20, (30, 2))])
    scores = rng.permutation(30) / 30.0
    kept = {tuple(boxes[i]) for i in nms(boxes, scores, 0.4)}
    perm = rng.permutation(30)
    kept_p = {tuple(boxes[perm][i]) for i in nms(boxes[perm], scores[perm], 0.4)}
    assert kept == kept_p
