"""Pixel-wise confusion accounting and the evaluation score suite.

Degenerate-denominator conventions, also echoed in reports: precision,
recall, and f1 are 1 when their denominators are zero because prediction and
truth agree vacuously (both empty), and 0 when a spurious or missed
foreground exists. The overlap score (dsc) is computed from the masks
directly, independently of the confusion-count route, so the dsc == f1
identity is a genuine cross-check of two code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .tensor import Tensor

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    jaccard: float
    dsc: float
    fp_per_volume: float = 0.0

    def with_fp_per_volume(self, value: float) -> "MetricsReport":
        return replace(self, fp_per_volume=value)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def confusion(pred_prob, target, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold a probability map and tally pixel-wise confusion counts."""
    p = _as_array(pred_prob)
    t = _as_array(target)
    if p.shape != t.shape:
        raise ShapeError("confusion", "shape", t.shape, p.shape)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"confusion: threshold must be in (0, 1), got {threshold}")
    pred = p >= threshold
    truth = t >= 0.5
    tp = int(np.logical_and(pred, truth).sum())
    fp = int(np.logical_and(pred, ~truth).sum())
    fn = int(np.logical_and(~pred, truth).sum())
    tn = int(np.logical_and(~pred, ~truth).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def compute_metrics_from_counts(
    c: ConfusionCounts, intersection: int, pred_area: int, target_area: int
) -> MetricsReport:
    """Score suite from counts plus mask-derived overlap quantities."""
    total = c.total
    accuracy = (c.tp + c.tn) / total if total else 1.0
    pred_empty = (c.tp + c.fp) == 0
    true_empty = (c.tp + c.fn) == 0
    if pred_empty:
        precision = 1.0 if true_empty else 0.0
    else:
        precision = c.tp / (c.tp + c.fp)
    if true_empty:
        recall = 1.0 if pred_empty else 0.0
    else:
        recall = c.tp / (c.tp + c.fn)
    f1 = 0.0 if precision + recall == 0.0 else 2.0 * precision * recall / (precision + recall)
    union = c.tp + c.fp + c.fn
    jaccard = 1.0 if union == 0 else c.tp / union
    if pred_area + target_area == 0:
        dsc = 1.0
    else:
        dsc = 2.0 * intersection / (pred_area + target_area)
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        jaccard=jaccard,
        dsc=dsc,
    )


def compute_metrics(c: ConfusionCounts, pred_mask, target_mask) -> MetricsReport:
    """Full report; the overlap score comes from the masks, not the counts."""
    pred = _as_array(pred_mask) >= 0.5
    truth = _as_array(target_mask) >= 0.5
    if pred.shape != truth.shape:
        raise ShapeError("compute_metrics", "shape", truth.shape, pred.shape)
    intersection = int(np.logical_and(pred, truth).sum())
    return compute_metrics_from_counts(c, intersection, int(pred.sum()), int(truth.sum()))


def fp_per_volume(
    pred_masks: Sequence[np.ndarray],
    target_masks: Sequence[np.ndarray],
    volume_ids: Sequence[str],
) -> float:
    """Mean count per volume of 8-connected predicted-foreground components
    with zero ground-truth overlap."""
    if not (len(pred_masks) == len(target_masks) == len(volume_ids)):
        raise ShapeError(
            "fp_per_volume", "list lengths",
            len(pred_masks), (len(target_masks), len(volume_ids)),
        )
    if not pred_masks:
        raise ValueError("fp_per_volume: empty grouping")
    per_volume: Dict[str, int] = {}
    for pred, truth, vid in zip(pred_masks, target_masks, volume_ids):
        p = _as_array(pred) >= 0.5
        t = _as_array(truth) >= 0.5
        if p.shape != t.shape:
            raise ShapeError("fp_per_volume", "mask shape", t.shape, p.shape)
        labels, n_components = ndimage.label(p, structure=EIGHT_CONNECTED)
        overlapping = np.unique(labels[t])
        overlapping = overlapping[overlapping > 0]
        per_volume[vid] = per_volume.get(vid, 0) + int(n_components) - int(len(overlapping))
    return float(np.mean(list(per_volume.values())))


def report_csv(rows: List[dict]) -> str:
    """Serialize metric rows as CSV with a fixed column order."""
    cols = [
        "dataset", "combo", "threshold", "accuracy", "jaccard",
        "precision", "recall", "f1", "dsc", "fp_per_volume",
    ]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(col, "")) for col in cols))
    return "\n".join(lines) + "\n"


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_table(rows: List[dict]) -> str:
    """Fixed-width text table mirroring the CSV columns."""
    cols = [
        "dataset", "combo", "threshold", "accuracy", "jaccard",
        "precision", "recall", "f1", "dsc", "fp_per_volume",
    ]
    rendered = [
        [
            f"{row.get(c):.4f}" if isinstance(row.get(c), float) else str(row.get(c, ""))
            for c in cols
        ]
        for row in rows
    ]
    widths = [max(len(c), *(len(r[i]) for r in rendered)) if rendered else len(c)
              for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for r in rendered:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines) + "\n"
