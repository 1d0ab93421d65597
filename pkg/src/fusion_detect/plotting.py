"""Matplotlib figures written next to the text outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("total", "rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg")


def plot_report(rows: Sequence, path) -> Path:
    """Grouped TPR / FDR bars per dataset; undefined values are left out."""
    path = Path(path)
    names = [r.dataset or "(unnamed)" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(rows) + 2), 3.2))
    width = 0.38
    for j, (attr, label, color) in enumerate((("tpr", "TPR (%)", "#2b6cb0"), ("fdr", "FDR (%)", "#c05621"))):
        xs = [i + (j - 0.5) * width for i, r in enumerate(rows) if getattr(r, attr) is not None]
        ys = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
        bars = ax.bar(xs, ys, width, label=label, color=color)
        ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_xticks(range(len(rows)), names)
    ax.set_ylim(0, 110)
    ax.set_ylabel("%")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_losses(history: Sequence[dict], path) -> Path:
    """Loss components against iteration from a training log."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [h["iteration"] for h in history]
    for key in LOSS_KEYS:
        ax.plot(its, [h[key] for h in history], label=key, linewidth=2 if key == "total" else 1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
