"""Pseudo-label quality and detection mAP over IOU thresholds 0.50:0.05:0.95.

Conventions:

* mAP matching accepts a prediction when IOU >= threshold; label quality uses
  IOU > threshold.
* Matching is greedy per frame: predictions in descending confidence (ties by
  input index) take the unmatched ground truth with the highest IOU.
* AP is the 101-point interpolated area under the precision envelope.
* Classes without any ground truth are left out of the mean.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .geometry import Box2D, iou
from .model import PseudoLabelRecord

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AP_INTERPOLATION = "101-point"

FrameKey = tuple[str, int]


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_preds: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def iou_matrix(preds: Sequence[Box2D], gts: Sequence[Box2D]) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = iou(p, g)
    return m


def confidence_order(preds: Sequence[Box2D]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))


def _greedy(order: Sequence[int], ious: np.ndarray, thresh: float, inclusive: bool) -> MatchResult:
    n_gt = ious.shape[1]
    taken = np.zeros(n_gt, dtype=bool)
    res = MatchResult()
    for i in order:
        best, best_iou = -1, -1.0
        for j in range(n_gt):
            if taken[j]:
                continue
            v = ious[i, j]
            ok = v >= thresh if inclusive else v > thresh
            if ok and v > best_iou:
                best, best_iou = j, v
        if best < 0:
            res.unmatched_preds.append(i)
        else:
            taken[best] = True
            res.pairs.append((i, best, float(best_iou)))
    res.unmatched_gts = [j for j in range(n_gt) if not taken[j]]
    return res


def match_greedy(
    preds: Sequence[Box2D], gts: Sequence[Box2D], iou_thresh: float, inclusive: bool = True
) -> MatchResult:
    """One-to-one greedy matching of predictions to ground truth in one frame."""
    return _greedy(confidence_order(preds), iou_matrix(preds, gts), iou_thresh, inclusive)


# -------------------------------------------------------------- label quality


@dataclass
class LabelQuality:
    precision: float | None
    recall: float
    emitted: int
    correct: int
    ground_truth: int
    per_class: dict[str, dict]
    uncovered_frames: int = 0

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "emitted": self.emitted,
            "correct": self.correct,
            "ground_truth": self.ground_truth,
            "per_class": self.per_class,
            "uncovered_frames": self.uncovered_frames,
        }


def label_quality(
    records: Iterable[PseudoLabelRecord],
    gt: Mapping[FrameKey, Sequence[Box2D]],
    iou_thresh: float = 0.5,
) -> LabelQuality:
    """Precision and recall of pseudo-labels against ground-truth instruments.

    A label is correct when its box matches an instrument with IOU above
    ``iou_thresh`` and carries that instrument's class. Recall counts only the
    frames present in ``records``. Frames missing from ``gt`` are reported in
    ``uncovered_frames`` and contribute emitted labels with no matches.
    """
    emitted = correct = n_gt = uncovered = 0
    table: dict[str, dict] = defaultdict(lambda: {"emitted": 0, "correct": 0, "ground_truth": 0})
    for rec in records:
        truth = gt.get(rec.key)
        if truth is None:
            uncovered += 1
            truth = []
        preds = list(rec.entries)
        res = match_greedy(preds, truth, iou_thresh, inclusive=False)
        emitted += len(preds)
        n_gt += len(truth)
        for p in preds:
            table[p.label]["emitted"] += 1
        for g in truth:
            table[g.label]["ground_truth"] += 1
        for i, j, _ in res.pairs:
            if preds[i].label == truth[j].label:
                correct += 1
                table[preds[i].label]["correct"] += 1
    per_class = {}
    for name in sorted(table):
        row = table[name]
        per_class[name] = {
            **row,
            "precision": row["correct"] / row["emitted"] if row["emitted"] else None,
            "recall": row["correct"] / row["ground_truth"] if row["ground_truth"] else None,
        }
    return LabelQuality(
        precision=correct / emitted if emitted else None,
        recall=correct / n_gt if n_gt else 0.0,
        emitted=emitted,
        correct=correct,
        ground_truth=n_gt,
        per_class=per_class,
        uncovered_frames=uncovered,
    )


# ------------------------------------------------------------------------ AP


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point AP from a TP/FP sequence already sorted by descending score."""
    if n_gt <= 0:
        raise ValueError("n_gt must be positive")
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # tolerance keeps exact recalls such as 7/10 from missing the float grid point 0.7000000000000001
    idx = np.searchsorted(recall + 1e-12, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


class _ClassIndex:
    """One class's predictions with their TP flags at every threshold."""

    def __init__(self, thresholds: Sequence[float]):
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.n_gt = 0
        self.scores: list[float] = []
        self.hits: list[np.ndarray] = []

    def add_frame(self, preds: list[Box2D], gts: list[Box2D]) -> None:
        self.n_gt += len(gts)
        if not preds:
            return
        order = confidence_order(preds)
        ious = iou_matrix(preds, gts)
        if len(preds) == 1 and len(gts) <= 1:
            hit = ious[0, 0] >= self.thresholds if gts else np.zeros(self.thresholds.size, dtype=bool)
            self.scores.append(preds[0].confidence)
            self.hits.append(hit)
            return
        flags = np.zeros((len(preds), self.thresholds.size), dtype=bool)
        for k, t in enumerate(self.thresholds):
            for i, _, _ in _greedy(order, ious, t, inclusive=True).pairs:
                flags[i, k] = True
        for i in order:
            self.scores.append(preds[i].confidence)
            self.hits.append(flags[i])

    def ap_all(self) -> list[float | None]:
        if self.n_gt == 0:
            return [None] * self.thresholds.size
        if not self.scores:
            return [0.0] * self.thresholds.size
        rank = np.argsort(-np.asarray(self.scores), kind="stable")
        hits = np.asarray(self.hits, dtype=float)[rank]
        return [interpolated_ap(hits[:, k], self.n_gt) for k in range(self.thresholds.size)]


def _index_classes(
    preds: Mapping[FrameKey, Sequence[Box2D]],
    gts: Mapping[FrameKey, Sequence[Box2D]],
    thresholds: Sequence[float],
    classes: Iterable[str] | None = None,
) -> dict[str, _ClassIndex]:
    wanted = None if classes is None else set(classes)
    index: dict[str, _ClassIndex] = {}
    for key in sorted(set(preds) | set(gts)):
        by_p: dict[str, list[Box2D]] = defaultdict(list)
        by_g: dict[str, list[Box2D]] = defaultdict(list)
        for b in preds.get(key, ()):
            by_p[b.label].append(b)
        for b in gts.get(key, ()):
            by_g[b.label].append(b)
        for cls in sorted(set(by_p) | set(by_g)):
            if wanted is not None and cls not in wanted:
                continue
            if cls not in index:
                index[cls] = _ClassIndex(thresholds)
            index[cls].add_frame(by_p.get(cls, []), by_g.get(cls, []))
    return index


def average_precision(
    preds: Mapping[FrameKey, Sequence[Box2D]],
    gts: Mapping[FrameKey, Sequence[Box2D]],
    cls: str,
    iou_thresh: float,
) -> float | None:
    """AP of one class at one IOU threshold; None when the class has no ground truth."""
    index = _index_classes(preds, gts, [iou_thresh], [cls])
    if cls not in index:
        return None
    return index[cls].ap_all()[0]


@dataclass
class MapReport:
    map: float
    per_class: dict[str, float]
    per_threshold: dict[str, float]
    table: dict[str, dict[str, float]]

    def as_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class": self.per_class,
            "per_threshold": self.per_threshold,
            "ap_interpolation": AP_INTERPOLATION,
            "thresholds": list(COCO_THRESHOLDS),
        }


def evaluate_map(
    preds: Mapping[FrameKey, Sequence[Box2D]],
    gts: Mapping[FrameKey, Sequence[Box2D]],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> MapReport:
    classes = sorted({b.label for boxes in gts.values() for b in boxes})
    if not classes:
        raise ValidationError("ground truth is empty; nothing to evaluate")
    index = _index_classes(preds, gts, thresholds, classes)
    table: dict[str, dict[str, float]] = {}
    for cls in classes:
        table[cls] = dict(zip((f"{t:.2f}" for t in thresholds), index[cls].ap_all()))
    per_threshold = {
        f"{t:.2f}": float(np.mean([table[c][f"{t:.2f}"] for c in classes])) for t in thresholds
    }
    per_class = {c: float(np.mean(list(table[c].values()))) for c in classes}
    return MapReport(float(np.mean(list(per_threshold.values()))), per_class, per_threshold, table)


def map_range(
    preds: Mapping[FrameKey, Sequence[Box2D]],
    gts: Mapping[FrameKey, Sequence[Box2D]],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> float:
    """Mean over thresholds of the per-class mean AP."""
    return evaluate_map(preds, gts, thresholds).map


def group_by_frame(items: Iterable[tuple[FrameKey, Box2D]]) -> dict[FrameKey, list[Box2D]]:
    out: dict[FrameKey, list[Box2D]] = defaultdict(list)
    for key, box in items:
        out[key].append(box)
    return dict(out)
