"""Axis-aligned boxes in ``(x, y, w, h)`` pixel form, IoU, delta coding and NMS.

Vectorised helpers take ``(n, 4)`` float arrays; :class:`Box` is the
scalar, user-facing form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box needs positive size, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect_ratio(self) -> float:
        return self.w / self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))


def as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    arr = [b.as_array() if isinstance(b, Box) else b for b in boxes]
    if len(arr) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(arr, dtype=np.float64).reshape(-1, 4)


def to_corners(b: np.ndarray) -> np.ndarray:
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def from_corners(c: np.ndarray) -> np.ndarray:
    return np.concatenate([c[..., :2], c[..., 2:] - c[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca, cb = to_corners(a), to_corners(b)
    x1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    # round-off in the corner arithmetic can nudge near-identical boxes past 1
    return np.minimum(out, 1.0)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def encode_deltas(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Regression targets ``(tx, ty, tw, th)`` taking ``anchors`` to ``gt``."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if np.any(a[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        raise ContractError("delta encoding needs positive box sizes")
    acx, acy = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    gcx, gcy = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
    return np.stack([(gcx - acx) / a[:, 2], (gcy - acy) / a[:, 3],
                     np.log(g[:, 2] / a[:, 2]), np.log(g[:, 3] / a[:, 3])], axis=1)


# exp() overflow guard for untrained regressors
_MAX_LOG_SCALE = np.log(1000.0 / 16)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if np.any(a[:, 2:] <= 0):
        raise ContractError("delta decoding needs positive anchor sizes")
    acx, acy = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    cx = acx + d[:, 0] * a[:, 2]
    cy = acy + d[:, 1] * a[:, 3]
    w = a[:, 2] * np.exp(np.minimum(d[:, 2], _MAX_LOG_SCALE))
    h = a[:, 3] * np.exp(np.minimum(d[:, 3], _MAX_LOG_SCALE))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def clip_boxes(boxes: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    h, w = image_hw
    c = to_corners(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    c[:, [0, 2]] = np.clip(c[:, [0, 2]], 0, w)
    c[:, [1, 3]] = np.clip(c[:, [1, 3]], 0, h)
    return from_corners(c)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes ordered by descending score, ties broken
    by lowest index.  A box is dropped when its IoU with an already kept box
    is strictly greater than ``iou_threshold``.
    """
    if not 0 < iou_threshold <= 1:
        raise ContractError(f"NMS threshold must lie in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ~(ious[i] > iou_threshold)
    return np.asarray(keep, dtype=np.int64)
