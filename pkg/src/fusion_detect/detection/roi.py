"""Quantised ROI max pooling (the Fast R-CNN variant, no interpolation)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError


@dataclass(frozen=True)
class RoiPoolConfig:
    output_size: tuple[int, int] = (7, 7)
    spatial_scale: float = 1.0 / 32

    def __post_init__(self):
        if min(self.output_size) < 1:
            raise ContractError(f"output_size must be positive, got {self.output_size}")


def roi_window(roi, feat_hw: tuple[int, int], scale: float) -> tuple[int, int, int, int]:
    """Feature-map window ``(y0, y1, x0, x1)`` covered by an image-space roi."""
    fh, fw = feat_hw
    x, y, w, h = (float(v) for v in roi)
    x0 = max(math.floor(x * scale), 0)
    y0 = max(math.floor(y * scale), 0)
    x1 = min(math.ceil((x + w) * scale), fw)
    y1 = min(math.ceil((y + h) * scale), fh)
    if x1 <= x0 or y1 <= y0:
        raise ContractError(f"roi {tuple(roi)} lies outside the {fh}x{fw} feature map")
    return y0, y1, x0, x1


def _bins(start: int, length: int, n: int) -> list[tuple[int, int]]:
    return [(start + (i * length) // n, start + -((-(i + 1) * length) // n)) for i in range(n)]


def roi_pool(features: np.ndarray, roi, cfg: RoiPoolConfig = RoiPoolConfig()):
    """Pool one roi from a ``(H, W, C)`` feature map.

    Returns ``(pooled (oh, ow, C), argmax)`` where ``argmax`` holds the flat
    ``H * W`` index each output took its value from (-1 for empty bins).
    """
    if features.ndim != 3:
        raise ContractError(f"roi_pool expects a single (H, W, C) map, got {features.shape}")
    fh, fw, c = features.shape
    y0, y1, x0, x1 = roi_window(roi, (fh, fw), cfg.spatial_scale)
    oh, ow = cfg.output_size
    out = np.zeros((oh, ow, c), dtype=features.dtype)
    arg = np.full((oh, ow, c), -1, dtype=np.int64)
    flat = features.reshape(fh * fw, c)
    for i, (ya, yb) in enumerate(_bins(y0, y1 - y0, oh)):
        for j, (xa, xb) in enumerate(_bins(x0, x1 - x0, ow)):
            if yb <= ya or xb <= xa:
                continue
            idx = (np.arange(ya, yb)[:, None] * fw + np.arange(xa, xb)[None, :]).reshape(-1)
            vals = flat[idx]
            k = vals.argmax(axis=0)
            arg[i, j] = idx[k]
            out[i, j] = vals[k, np.arange(c)]
    return out, arg


def roi_pool_backward(argmax: np.ndarray, grad_out: np.ndarray, feat_shape) -> np.ndarray:
    fh, fw, c = feat_shape
    grad = np.zeros((fh * fw, c), dtype=grad_out.dtype)
    valid = argmax >= 0
    chan = np.broadcast_to(np.arange(c), argmax.shape)
    np.add.at(grad, (argmax[valid], chan[valid]), grad_out[valid])
    return grad.reshape(fh, fw, c)


def roi_pool_batch(features: np.ndarray, rois: np.ndarray, batch_idx: np.ndarray,
                   cfg: RoiPoolConfig = RoiPoolConfig()):
    """Pool many rois from an ``(N, H, W, C)`` batch; returns ``(R, oh, ow, C)``
    and the per-roi argmax maps."""
    outs, args = [], []
    for roi, b in zip(rois, batch_idx):
        o, a = roi_pool(features[int(b)], roi, cfg)
        outs.append(o)
        args.append(a)
    oh, ow = cfg.output_size
    if not outs:
        return np.zeros((0, oh, ow, features.shape[-1]), features.dtype), []
    return np.stack(outs), args


def roi_pool_batch_backward(args, batch_idx, grad_out: np.ndarray, feat_shape) -> np.ndarray:
    n, fh, fw, c = feat_shape
    grad = np.zeros(feat_shape, dtype=grad_out.dtype)
    for a, b, g in zip(args, batch_idx, grad_out):
        grad[int(b)] += roi_pool_backward(a, g, (fh, fw, c))
    return grad
