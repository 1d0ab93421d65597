from fractions import Fraction

import numpy as np
import pytest

from fusion_detect.backbones import BackboneConfig
from fusion_detect.detection.anchors import AnchorSet
from fusion_detect.detection.boxes import clip_boxes, decode_deltas, nms
from fusion_detect.detection.model import (DetectConfig, DetectorModel, ModelConfig, ProposalConfig,
                                           SamplingConfig, propose)
from fusion_detect.detection.roi import RoiPoolConfig
from fusion_detect.errors import ContractError


def _model(seed=0, dims=(32, 32, 3)):
    cfg = ModelConfig(backbone=BackboneConfig(width_scale=Fraction(1, 16), input_dims=dims),
                      anchors=AnchorSet(((12, 12), (20, 14))), head_hidden=16,
                      roi=RoiPoolConfig((2, 2), 1 / 32))
    return DetectorModel(cfg, seed=seed)


def test_propose_single_anchor_clipped():
    anchors = np.array([[-4.0, 10.0, 20.0, 10.0]])
    boxes, scores = propose(np.array([0.5]), np.zeros((1, 4)), anchors, (32, 32))
    np.testing.assert_array_equal(boxes, [[0, 10, 16, 10]])
    assert scores.tolist() == [0.5]


def test_propose_post_nms_top_one():
    rng = np.random.default_rng(0)
    anchors = np.column_stack([rng.uniform(0, 40, (20, 2)), rng.uniform(5, 20, (20, 2))])
    obj = rng.random(20)
    boxes, scores = propose(obj, np.zeros((20, 4)), anchors, (64, 64), ProposalConfig(post_nms_top_n=1))
    assert len(boxes) == 1 and scores[0] == obj.max()


def test_propose_equals_stepwise_oracle():
    anchors = np.array([[0, 0, 10, 10], [2, 1, 10, 10], [30, 30, 8, 8], [60, 0, 10, 3]], dtype=float)
    deltas = np.array([[0.1, 0, 0, 0], [0, 0.2, 0.1, 0], [0, 0, 0, 0], [0.5, 0, 0, -1.5]])
    obj = np.array([0.4, 0.9, 0.7, 0.95])
    cfg = ProposalConfig(pre_nms_top_n=3, post_nms_top_n=2, nms_threshold=0.5, min_size=2.0)
    boxes, scores = propose(obj, deltas, anchors, (40, 64), cfg)
    # step by step: decode, clip, drop small, top-3, nms, top-2
    dec = clip_boxes(decode_deltas(anchors, deltas), (40, 64))
    big = [i for i in range(4) if dec[i, 2] >= 2 and dec[i, 3] >= 2]
    top = sorted(big, key=lambda i: -obj[i])[:3]
    kept = [top[j] for j in nms(dec[top], obj[top], 0.5)][:2]
    np.testing.assert_array_equal(boxes, dec[kept])
    np.testing.assert_array_equal(scores, obj[kept])
    assert 3 not in kept  # anchor 3 shrinks below min_size


def test_detect_threshold_one_is_empty():
    model = _model()
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (2, 32, 32, 3)).astype(np.float32)
    assert model.detect(x, DetectConfig(score_threshold=1.0)) == [[], []]


def test_detect_invariants_and_determinism():
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (2, 32, 32, 3)).astype(np.float32)
    cfg = DetectConfig(score_threshold=0.3)
    a = _model(seed=4).detect(x, cfg)
    b = _model(seed=4).detect(x, cfg)
    assert a == b
    for dets in a:
        for d in dets:
            assert d.class_id >= 1 and cfg.score_threshold <= d.score <= 1
            bx = d.box
            assert bx.x >= 0 and bx.y >= 0 and bx.x + bx.w <= 32 + 1e-9 and bx.y + bx.h <= 32 + 1e-9
        assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)


def test_param_mismatch_rejected():
    model = _model()
    params = dict(model.params)
    params.pop("head.cls.bias")
    with pytest.raises(ContractError):
        DetectorModel(model.cfg, params)


def test_model_config_round_trip():
    cfg = _model().cfg
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_loss_matches_loss_and_grads():
    model = _model().astype(np.float64)
    rng = np.random.default_rng(2)
    x = rng.uniform(-0.5, 0.5, (1, 32, 32, 3))
    lb, grads, targets = model.loss_and_grads(model.params, x, gt_boxes=[np.array([[4.0, 6.0, 14, 12]])],
                                              gt_classes=[np.ones(1, int)], rng=rng,
                                              cfg=SamplingConfig(rpn_batch=16, roi_batch=8))
    again = model.loss(model.params, x, targets, SamplingConfig(rpn_batch=16, roi_batch=8))
    assert again.total == pytest.approx(lb.total, rel=1e-12)
    assert set(grads) == set(model.params)
    assert all(grads[k].shape == model.params[k].shape for k in grads)


@pytest.mark.parametrize("bands,lo,hi", [
    ({}, 0.3, 0.6),
    ({"roi_positive_band": (0.5, 1.0), "roi_negative_band": (0.0, 0.5)}, 0.5, 0.5),
])
def test_roi_bands_decide_head_labels(bands, lo, hi):
    from fusion_detect.detection.boxes import iou_matrix
    model = _model()
    gt = np.array([[6.0, 5.0, 14.0, 12.0]])
    cfg = SamplingConfig(rpn_batch=16, roi_batch=64, roi_positive_fraction=0.5, roi_jitter=40, **bands)
    a = len(model.anchors)
    seen_mid = False
    for seed in range(5):
        t = model.sample_targets(np.full((1, a), 0.5), np.zeros((1, a, 4)), [gt], [np.ones(1, int)],
                                 np.random.default_rng(seed), cfg)
        best = iou_matrix(t.rois, gt).max(axis=1)
        fg = t.roi_labels > 0
        # positives at or above the positive band floor, negatives at or below the negative ceiling
        assert np.all(best[fg] >= hi) and np.all(best[~fg] <= lo)
        seen_mid |= bool(np.any((best > 0.3) & (best < 0.5)))
    if lo == 0.5:
        assert seen_mid
