"""Detection matching, TPR / FDR, frame rate and result tables."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detection.boxes import as_boxes, iou_matrix
from .errors import ContractError, UndefinedMetricError


@dataclass(frozen=True)
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def match_detections(dets, gt, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order (ties: lowest index first).

    ``dets`` is a sequence of objects with ``.box`` and ``.score`` or of
    ``(box, score)`` pairs.  A detection is a true positive when its best
    still-unmatched gt reaches ``iou_threshold``.
    """
    if not 0 < iou_threshold <= 1:
        raise ContractError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    boxes, scores = [], []
    for d in dets:
        if hasattr(d, "box"):
            boxes.append(d.box)
            scores.append(d.score)
        else:
            boxes.append(d[0])
            scores.append(d[1])
    det_arr, gt_arr = as_boxes(boxes), as_boxes(gt)
    if len(det_arr) == 0:
        return MatchResult(0, 0, len(gt_arr))
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ious = iou_matrix(det_arr, gt_arr)
    free = np.ones(len(gt_arr), dtype=bool)
    tp = 0
    for i in order:
        if not free.any():
            continue
        cand = np.where(free, ious[i], -1.0)
        j = int(cand.argmax())
        if cand[j] >= iou_threshold:
            free[j] = False
            tp += 1
    return MatchResult(tp, len(det_arr) - tp, int(free.sum()))


def tpr(m: MatchResult) -> float:
    if m.tp + m.fn == 0:
        raise UndefinedMetricError("TPR is undefined without ground-truth boxes")
    return m.tp / (m.tp + m.fn) * 100.0


def fdr(m: MatchResult) -> float:
    if m.tp + m.fp == 0:
        raise UndefinedMetricError("FDR is undefined without detections")
    return m.fp / (m.tp + m.fp) * 100.0


def measure_frame_rate(detect_one: Callable[[object], object], images: Sequence, warmup: int = 1,
                       clock: Callable[[], float] = time.perf_counter) -> float:
    """Frames per second over the images after the first ``warmup``, each
    processed by one sequential ``detect_one`` call."""
    timed = list(images)[warmup:]
    if not timed:
        raise ContractError("no images left to time after warmup")
    for im in list(images)[:warmup]:
        detect_one(im)
    start = clock()
    for im in timed:
        detect_one(im)
    elapsed = clock() - start
    if elapsed <= 0:
        raise ContractError("timer did not advance")
    return len(timed) / elapsed


@dataclass
class ReportRow:
    dataset: str
    tpr: float | None
    fdr: float | None
    fps: float | None
    tp: int | None = None
    fp: int | None = None
    fn: int | None = None

    @classmethod
    def from_match(cls, dataset: str, m: MatchResult, fps: float | None) -> "ReportRow":
        def safe(fn):
            try:
                return fn(m)
            except UndefinedMetricError:
                return None
        return cls(dataset, safe(tpr), safe(fdr), fps, m.tp, m.fp, m.fn)

    def to_json(self) -> dict:
        d = {"dataset": self.dataset, "tpr": self.tpr, "fdr": self.fdr, "fps": self.fps}
        if self.tp is not None:
            d.update(tp=self.tp, fp=self.fp, fn=self.fn)
        return d


HEADER = ("Dataset", "TPR (%)", "FDR (%)", "Frame Rate (fps)")


def _fmt(v: float | None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "undefined"
    return f"{v:.2f}"


def render_table(rows: Sequence[ReportRow]) -> str:
    if not rows:
        raise ContractError("a report needs at least one row")
    cells = [HEADER] + [(r.dataset or "(unnamed)", _fmt(r.tpr), _fmt(r.fdr), _fmt(r.fps)) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(4)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_json(rows: Sequence[ReportRow]) -> str:
    return json.dumps({"rows": [r.to_json() for r in rows]}, indent=2) + "\n"


def load_report(path) -> list[ReportRow]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [ReportRow(r["dataset"], r["tpr"], r["fdr"], r["fps"], r.get("tp"), r.get("fp"), r.get("fn"))
            for r in data["rows"]]


def render_report(rows: Sequence[ReportRow], out_dir=None, figure: bool = True) -> str:
    """Return the text table; with ``out_dir``, also write ``report.txt``,
    ``report.json`` and (optionally) ``report.png``."""
    text = render_table(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text, encoding="utf-8")
        (out_dir / "report.json").write_text(report_json(rows), encoding="utf-8")
        if figure:
            from .plotting import plot_report
            plot_report(rows, out_dir / "report.png")
    return text
