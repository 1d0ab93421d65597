"""Anchor shape estimation (IoU k-means), dense tiling and target assignment."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError, DimensionError, ValidationError
from .boxes import as_boxes, iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class AnchorSet:
    shapes: tuple[tuple[float, float], ...]
    stride: int = 32

    def __post_init__(self):
        shapes = tuple((float(w), float(h)) for w, h in self.shapes)
        object.__setattr__(self, "shapes", shapes)
        if len(shapes) < 1:
            raise ContractError("an anchor set needs at least one shape")
        if any(w <= 0 or h <= 0 for w, h in shapes):
            raise ContractError(f"anchor shapes must be positive: {shapes}")

    @property
    def k(self) -> int:
        return len(self.shapes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.shapes, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"shapes": [list(s) for s in self.shapes], "stride": self.stride}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSet":
        return cls(tuple(tuple(s) for s in d["shapes"]), int(d.get("stride", 32)))


def write_anchor_file(anchors: AnchorSet, path) -> None:
    lines = [f"{w!r} {h!r}" for w, h in anchors.shapes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_anchor_file(path, stride: int = 32) -> AnchorSet:
    shapes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected 'w h', got {line!r}")
        shapes.append((float(parts[0]), float(parts[1])))
    return AnchorSet(tuple(shapes), stride)


def shape_iou(shapes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of (w, h) pairs with every centroid, both aligned at the origin."""
    inter = (np.minimum(shapes[:, None, 0], centroids[None, :, 0])
             * np.minimum(shapes[:, None, 1], centroids[None, :, 1]))
    area_s = shapes[:, 0] * shapes[:, 1]
    area_c = centroids[:, 0] * centroids[:, 1]
    return inter / (area_s[:, None] + area_c[None, :] - inter)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    objective: list[float]
    iterations: int

    @property
    def mean_iou(self) -> float:
        return 1.0 - self.objective[-1]


def _cost(shapes: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    ious = shape_iou(shapes, centroids)
    return float(np.mean(1.0 - ious[np.arange(len(shapes)), assignment]))


def kmeans_iou(shapes: np.ndarray, k: int, rng: np.random.Generator,
               max_iter: int = 300) -> KMeansResult:
    """k-means over box shapes under the distance ``1 - IoU``.

    Seeding is k-means++ over the distinct shapes.  The update step moves a
    centroid to its cluster mean only when that lowers the cluster's cost,
    so the objective never increases.  ``objective[i]`` is the mean distance
    after round ``i`` (index 0 is the seeding).
    """
    shapes = np.asarray(shapes, dtype=np.float64).reshape(-1, 2)
    if len(shapes) == 0:
        raise ContractError("cannot cluster an empty box list")
    if k <= 0:
        raise ContractError(f"k must be positive, got {k}")
    distinct = np.unique(shapes, axis=0)
    if k > len(distinct):
        raise ContractError(f"k={k} exceeds the {len(distinct)} distinct box shapes")

    chosen = [int(rng.integers(len(distinct)))]
    while len(chosen) < k:
        d = 1.0 - shape_iou(distinct, distinct[chosen]).max(axis=1)
        d[chosen] = 0.0
        chosen.append(int(rng.choice(len(distinct), p=d / d.sum())))
    centroids = distinct[chosen].copy()

    assignment = np.argmax(shape_iou(shapes, centroids), axis=1)
    history = [_cost(shapes, centroids, assignment)]
    it = 0
    for it in range(1, max_iter + 1):
        moved = False
        for j in range(k):
            members = shapes[assignment == j]
            if len(members) == 0:
                continue
            mean = members.mean(axis=0)
            old_cost = np.sum(1 - shape_iou(members, centroids[j:j + 1]))
            new_cost = np.sum(1 - shape_iou(members, mean[None]))
            if new_cost < old_cost:
                centroids[j] = mean
                moved = True
        new_assignment = np.argmax(shape_iou(shapes, centroids), axis=1)
        changed = not np.array_equal(new_assignment, assignment)
        assignment = new_assignment
        history.append(_cost(shapes, centroids, assignment))
        if not (moved or changed):
            break
    return KMeansResult(centroids, assignment, history, it)


def estimate_anchors(boxes, k: int, seed: int = 0, stride: int = 32,
                     max_iter: int = 300) -> tuple[AnchorSet, float]:
    """Cluster box shapes into ``k`` anchors sorted by area.

    Returns the anchor set and the mean IoU between each box and its
    assigned anchor.
    """
    arr = as_boxes(boxes)
    if len(arr) == 0:
        raise ContractError("cannot estimate anchors from an empty box list")
    res = kmeans_iou(arr[:, 2:], k, np.random.default_rng(seed), max_iter)
    order = np.argsort(res.centroids[:, 0] * res.centroids[:, 1], kind="stable")
    shapes = tuple((float(w), float(h)) for w, h in res.centroids[order])
    return AnchorSet(shapes, stride), res.mean_iou


def generate_anchors(anchors: AnchorSet, feature_hw: tuple[int, int],
                     image_hw: tuple[int, int]) -> np.ndarray:
    """Tile every anchor shape over the feature grid.

    Row order is feature row, feature column, then shape.  Centres sit at
    ``(i + 0.5) * stride``; boxes are not clipped.
    """
    fh, fw = feature_hw
    ih, iw = image_hw
    s = anchors.stride
    if fh * s != ih or fw * s != iw:
        raise DimensionError(
            f"feature grid {fh}x{fw} at stride {s} does not cover image {ih}x{iw}")
    cy, cx = np.meshgrid((np.arange(fh) + 0.5) * s, (np.arange(fw) + 0.5) * s, indexing="ij")
    wh = anchors.as_array()
    centers = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
    xy = centers - wh[None] / 2
    out = np.concatenate([xy, np.broadcast_to(wh[None], xy.shape)], axis=-1)
    return out.reshape(-1, 4)


def inside_image(boxes: np.ndarray, image_hw: tuple[int, int], border: float = 0.0) -> np.ndarray:
    h, w = image_hw
    return ((boxes[:, 0] >= -border) & (boxes[:, 1] >= -border)
            & (boxes[:, 0] + boxes[:, 2] <= w + border)
            & (boxes[:, 1] + boxes[:, 3] <= h + border))


def assign_targets(boxes: np.ndarray, gt: np.ndarray,
                   positive_band: tuple[float, float] = (0.6, 1.0),
                   negative_band: tuple[float, float] = (0.0, 0.3),
                   force_best: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Label each box positive / negative / ignore by its best gt overlap.

    Returns ``(labels, matched)`` where ``labels`` holds
    ``POSITIVE``/``NEGATIVE``/``IGNORE`` and ``matched`` the gt index with the
    highest IoU (lowest index on ties; -1 when there is no gt).  With
    ``force_best`` each gt also claims its highest-IoU box as positive (the
    next best one when an earlier gt already took it).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if len(gt) == 0:
        return np.full(n, NEGATIVE, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(boxes, gt)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[(best >= negative_band[0]) & (best <= negative_band[1])] = NEGATIVE
    labels[(best >= positive_band[0]) & (best <= positive_band[1])] = POSITIVE
    if force_best and n:
        # each gt claims its best box not already claimed by an earlier gt,
        # so two gts sharing a best anchor both keep a positive
        claimed: set[int] = set()
        for j in range(len(gt)):
            for i in np.argsort(-ious[:, j], kind="stable"):
                if ious[i, j] <= 0:
                    break
                if int(i) not in claimed:
                    claimed.add(int(i))
                    labels[i] = POSITIVE
                    matched[i] = j
                    break
    return labels, matched
