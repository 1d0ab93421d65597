"""RPN and R-CNN losses.

The public ``rpn_loss`` / ``rcnn_loss`` take probabilities, as a caller
holding detector outputs would.  The ``*_from_logits`` variants are what
training uses: they are numerically stable and also return gradients with
respect to the raw head outputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import nn
from ..errors import ContractError
from .anchors import IGNORE, POSITIVE

_TINY = 1e-12


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1, x, np.sign(x))


@dataclass
class LossBreakdown:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    rcnn_cls: float = 0.0
    rcnn_reg: float = 0.0
    lambda_rpn: float = 1.0
    lambda_rcnn: float = 1.0

    @property
    def total(self) -> float:
        return (self.rpn_cls + self.lambda_rpn * self.rpn_reg
                + self.rcnn_cls + self.lambda_rcnn * self.rcnn_reg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def _rpn_check(labels, deltas, target_deltas):
    labels = np.asarray(labels).reshape(-1)
    sampled = labels != IGNORE
    if not sampled.any():
        raise ContractError("RPN loss needs at least one sampled anchor")
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    target_deltas = np.asarray(target_deltas, dtype=np.float64).reshape(-1, 4)
    return labels, sampled, deltas, target_deltas


def rpn_loss(objectness_probs, deltas, anchor_labels, target_deltas, lam: float = 1.0,
             num_locations: int | None = None) -> LossBreakdown:
    """Objectness cross-entropy averaged over sampled anchors, plus
    smooth-L1 regression over positives divided by the number of anchor
    locations (``num_locations``, defaulting to the anchor count)."""
    labels, sampled, deltas, target_deltas = _rpn_check(anchor_labels, deltas, target_deltas)
    p = np.asarray(objectness_probs, dtype=np.float64).reshape(-1)
    y = (labels == POSITIVE).astype(np.float64)
    ps = np.clip(p[sampled], _TINY, 1 - _TINY)
    ys = y[sampled]
    cls = float(np.mean(-(ys * np.log(ps) + (1 - ys) * np.log(1 - ps))))
    norm = num_locations if num_locations is not None else len(labels)
    pos = labels == POSITIVE
    reg = float(smooth_l1(deltas[pos] - target_deltas[pos]).sum() / norm)
    return LossBreakdown(rpn_cls=cls, rpn_reg=reg, lambda_rpn=lam)


def rpn_loss_from_logits(logits, deltas, anchor_labels, target_deltas, lam: float = 1.0,
                         num_locations: int | None = None):
    """``logits`` is ``(n, 2)`` (background, object).  Returns
    ``(LossBreakdown, grad_logits, grad_deltas)``; gradients are of
    ``rpn_cls + lam * rpn_reg``."""
    labels, sampled, deltas, target_deltas = _rpn_check(anchor_labels, deltas, target_deltas)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 2)
    y = (labels == POSITIVE).astype(np.int64)
    logp = nn.log_softmax(logits)
    ns = int(sampled.sum())
    cls = float(-logp[sampled, y[sampled]].sum() / ns)
    g_logits = np.exp(logp)
    g_logits[np.arange(len(y)), y] -= 1.0
    g_logits[~sampled] = 0.0
    g_logits /= ns
    norm = num_locations if num_locations is not None else len(labels)
    pos = labels == POSITIVE
    diff = deltas - target_deltas
    reg = float(smooth_l1(diff[pos]).sum() / norm)
    g_deltas = np.zeros_like(deltas)
    g_deltas[pos] = lam * smooth_l1_grad(diff[pos]) / norm
    return LossBreakdown(rpn_cls=cls, rpn_reg=reg, lambda_rpn=lam), g_logits, g_deltas


def _rcnn_shapes(class_deltas, n_rois, n_classes):
    d = np.asarray(class_deltas, dtype=np.float64)
    return d.reshape(n_rois, n_classes, 4)


def rcnn_loss(class_probs, class_deltas, roi_labels, target_deltas, lam: float = 1.0) -> LossBreakdown:
    """Per-ROI ``-ln p[u]`` averaged over ROIs, plus smooth-L1 on the deltas
    of the true class averaged over foreground ROIs (``u > 0``)."""
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ContractError(f"class_probs must be (rois, classes), got {probs.shape}")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("class probabilities must sum to 1 per ROI")
    u = np.asarray(roi_labels, dtype=np.int64).reshape(-1)
    n, c = probs.shape
    d = _rcnn_shapes(class_deltas, n, c)
    v = np.asarray(target_deltas, dtype=np.float64).reshape(n, 4)
    cls = float(np.mean(-np.log(np.clip(probs[np.arange(n), u], _TINY, None))))
    fg = u > 0
    reg = 0.0
    if fg.any():
        reg = float(smooth_l1(d[fg, u[fg]] - v[fg]).sum(axis=1).mean())
    return LossBreakdown(rcnn_cls=cls, rcnn_reg=reg, lambda_rcnn=lam)


def rcnn_loss_from_logits(logits, class_deltas, roi_labels, target_deltas, lam: float = 1.0):
    """Returns ``(LossBreakdown, grad_logits, grad_deltas)``."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    u = np.asarray(roi_labels, dtype=np.int64).reshape(-1)
    d = _rcnn_shapes(class_deltas, n, c)
    v = np.asarray(target_deltas, dtype=np.float64).reshape(n, 4)
    logp = nn.log_softmax(logits)
    cls = float(-logp[np.arange(n), u].mean())
    g_logits = np.exp(logp)
    g_logits[np.arange(n), u] -= 1.0
    g_logits /= n
    g_d = np.zeros_like(d)
    fg = np.flatnonzero(u > 0)
    reg = 0.0
    if len(fg):
        diff = d[fg, u[fg]] - v[fg]
        reg = float(smooth_l1(diff).sum(axis=1).mean())
        g_d[fg, u[fg]] = lam * smooth_l1_grad(diff) / len(fg)
    return (LossBreakdown(rcnn_cls=cls, rcnn_reg=reg, lambda_rcnn=lam),
            g_logits, g_d.reshape(np.shape(class_deltas)))
