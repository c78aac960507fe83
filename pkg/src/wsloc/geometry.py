"""Axis-aligned box arithmetic shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ValidationError


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned rectangle in continuous pixel coordinates.

    ``label`` is a symbolic name: a part kind (``"clevis"``) for part
    detections, a tool class name for tool detections and pseudo-labels.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0
    label: str | None = None

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max", "confidence"):
            object.__setattr__(self, name, float(getattr(self, name)))
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if any(c != c for c in coords):
            raise ValidationError(f"box has NaN coordinate: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box: {coords}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def with_label(self, label: str | None, confidence: float | None = None) -> Box2D:
        return Box2D(
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.confidence if confidence is None else confidence,
            label,
        )

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def intersection_area(a: Box2D, b: Box2D) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box2D, b: Box2D) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def intersection_over_min(a: Box2D, b: Box2D) -> float:
    """Intersection divided by the smaller area; 1.0 under containment."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / min(a.area, b.area)


OVERLAP_METRICS = {"iou": iou, "iomin": intersection_over_min}


def overlap_fn(name: str):
    try:
        return OVERLAP_METRICS[name]
    except KeyError:
        raise ValidationError(
            f"unknown overlap metric {name!r}; expected one of {sorted(OVERLAP_METRICS)}"
        ) from None


def ordering_key(b: Box2D) -> tuple[float, float]:
    """Left-to-right sort key: (x-center, y-center)."""
    return b.center


def sort_left_to_right(boxes: Sequence[Box2D]) -> list[Box2D]:
    """Sort by x-center, then y-center, then original position (stable sort)."""
    return [b for _, b in sorted(enumerate(boxes), key=lambda t: (ordering_key(t[1]), t[0]))]


def union_box(boxes: Iterable[Box2D], label: str | None = None) -> Box2D:
    boxes = list(boxes)
    return Box2D(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
        1.0,
        label,
    )
