"""Anchors, proposals, ROI pooling, the detection head and its losses."""
from .anchors import (IGNORE, NEGATIVE, POSITIVE, AnchorSet, assign_targets, estimate_anchors,
                      generate_anchors, kmeans_iou, read_anchor_file, write_anchor_file)
from .boxes import Box, decode_deltas, encode_deltas, iou, iou_matrix, nms
from .losses import LossBreakdown, rcnn_loss, rpn_loss, smooth_l1
from .model import (DetectConfig, Detection, DetectorModel, ModelConfig, ProposalConfig,
                    SamplingConfig, propose)
from .roi import RoiPoolConfig, roi_pool, roi_pool_backward

__all__ = [
    "IGNORE", "NEGATIVE", "POSITIVE", "AnchorSet", "assign_targets", "estimate_anchors",
    "generate_anchors", "kmeans_iou", "read_anchor_file", "write_anchor_file", "Box",
    "decode_deltas", "encode_deltas", "iou", "iou_matrix", "nms", "LossBreakdown", "rcnn_loss",
    "rpn_loss", "smooth_l1", "DetectConfig", "Detection", "DetectorModel", "ModelConfig",
    "ProposalConfig", "SamplingConfig", "propose", "RoiPoolConfig", "roi_pool", "roi_pool_backward",
]
