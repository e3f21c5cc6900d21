"""Evaluation metrics: ranked accuracy, localization recall and iteration statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .locenv import iou


def rank_classes(logits: np.ndarray) -> list[int]:
    """Class ids by descending logit; equal logits keep the lower id first."""
    logits = np.asarray(logits)
    return [int(i) for i in np.lexsort((np.arange(logits.shape[-1]), -logits))]


def top_k_accuracy(predictions, labels, k: int) -> float:
    """Fraction of scenes whose label is among the first ``k`` ranked classes."""
    predictions, labels = list(predictions), list(labels)
    if not predictions:
        raise ValueError("empty input")
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = 0
    for ranked, label in zip(predictions, labels):
        if len(ranked) < k:
            raise ValueError(f"ranked list of length {len(ranked)} shorter than k={k}")
        hits += int(label) in [int(c) for c in list(ranked)[:k]]
    return hits / len(predictions)


def recall_at_iou(final_boxes, gt_boxes, threshold: float = 0.5) -> float:
    """Fraction of scenes whose final box reaches ``threshold`` IoU with the ground truth.

    Accepts boxes directly or objects with a ``final_box`` attribute. Class is ignored.
    """
    final_boxes = [getattr(b, "final_box", b) for b in final_boxes]
    gt_boxes = list(gt_boxes)
    if not final_boxes:
        raise ValueError("empty input")
    if len(final_boxes) != len(gt_boxes):
        raise ValueError("box lists differ in length")
    if any(g is None for g in gt_boxes):
        raise ValueError("ground-truth boxes are required for recall")
    hits = sum(iou(b, g) >= threshold for b, g in zip(final_boxes, gt_boxes))
    return hits / len(final_boxes)


def iteration_stats(steps) -> tuple[float, float]:
    """Median and mean episode length; an immediate Trigger counts as zero."""
    steps = [getattr(s, "steps", s) for s in steps]
    if not steps:
        raise ValueError("empty input")
    arr = np.sort(np.asarray(steps, dtype=np.float64))
    n = arr.size
    mid = n // 2
    median = arr[mid] if n % 2 else (arr[mid - 1] + arr[mid]) / 2
    return float(median), float(arr.sum() / n)


@dataclass
class EvalReport:
    top1: float
    top5: float
    recall_iou50: float | None
    iter_median: float
    iter_mean: float
    n: int
    per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.top1 > self.top5:
            raise ValueError("top1 exceeds top5")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rec = "-" if self.recall_iou50 is None else f"{100 * self.recall_iou50:.1f}"
        return ("  Top-1 [%]  Top-5 [%]  Recall [%]  Median  Mean\n"
                f"  {100 * self.top1:9.2f}  {100 * self.top5:9.2f}  {rec:>10}  "
                f"{self.iter_median:6.1f}  {self.iter_mean:4.1f}\n")


def build_report(results, labels, gt_boxes=None, threshold: float = 0.5) -> EvalReport:
    """Assemble an :class:`EvalReport` from inference results in manifest order."""
    labels = [int(v) for v in labels]
    ranked = [r.ranking for r in results]
    k5 = min(5, len(ranked[0]))
    have_gt = gt_boxes is not None and all(g is not None for g in gt_boxes)
    recall = recall_at_iou(results, gt_boxes, threshold) if have_gt else None
    median, mean = iteration_stats(results)
    per_class = {}
    for c in sorted(set(labels)):
        idx = [i for i, v in enumerate(labels) if v == c]
        per_class[str(c)] = {"n": len(idx),
                             "top1": top_k_accuracy([ranked[i] for i in idx], [c] * len(idx), 1)}
    return EvalReport(top_k_accuracy(ranked, labels, 1), top_k_accuracy(ranked, labels, k5),
                      recall, median, mean, len(labels), per_class)


def mean_report(reports: list[EvalReport]) -> dict:
    """Average of the scalar fields across seeds."""
    out = {}
    for key in ("top1", "top5", "recall_iou50", "iter_median", "iter_mean"):
        vals = [getattr(r, key) for r in reports]
        out[key] = None if any(v is None for v in vals) else float(np.mean(vals))
    return out

