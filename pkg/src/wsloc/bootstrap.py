"""Round-0 pseudo-labels: pick anchor part boxes and label them in caption order.

Captions list instruments in the order they appear left to right unless two of
them cross. Frames whose anchor count equals the caption length are labeled by
sorting anchors left to right and zipping them with the caption.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ._parallel import parallel_map
from .errors import ValidationError
from .geometry import Box2D, sort_left_to_right
from .model import (
    ClipCaption,
    FrameDetections,
    PartKind,
    Provenance,
    PseudoLabelRecord,
    is_special_name,
)

ANCHOR_RULES = ("clevis_or_special_tip", "clevis_only")
SKIP_REASONS = ("wrong_anchor_count", "caption_length_mismatch", "low_confidence_only")


@dataclass(frozen=True)
class BootstrapConfig:
    min_part_confidence: float = 0.25
    anchor_rule: str = "clevis_or_special_tip"
    required_tool_count: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_part_confidence <= 1.0:
            raise ValidationError(f"min_part_confidence {self.min_part_confidence} outside [0, 1]")
        if self.anchor_rule not in ANCHOR_RULES:
            raise ValidationError(f"anchor_rule must be one of {ANCHOR_RULES}, got {self.anchor_rule!r}")
        if self.required_tool_count < 1:
            raise ValidationError("required_tool_count must be >= 1")

    def params(self) -> tuple:
        return tuple(sorted(
            {
                "min_part_confidence": self.min_part_confidence,
                "anchor_rule": self.anchor_rule,
                "required_tool_count": self.required_tool_count,
            }.items()
        ))


def _attached_tip(clevis: Box2D, tips: list[Box2D], taken: set[int]) -> int | None:
    """Index of the closest free tip touching the clevis grown by half its size."""
    mx, my = clevis.width / 2, clevis.height / 2
    cx, cy = clevis.center
    best, best_d = None, None
    for i, t in enumerate(tips):
        if i in taken:
            continue
        if (
            t.x_max <= clevis.x_min - mx
            or t.x_min >= clevis.x_max + mx
            or t.y_max <= clevis.y_min - my
            or t.y_min >= clevis.y_max + my
        ):
            continue
        tx, ty = t.center
        d = (tx - cx) ** 2 + (ty - cy) ** 2
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def anchor_boxes(frame: FrameDetections, caption: ClipCaption, cfg: BootstrapConfig) -> list[Box2D]:
    """Anchor boxes above the confidence floor, sorted left to right.

    Clevis boxes locate the instruments. Under ``clevis_or_special_tip``, when
    the clevis count matches the caption, the clevis at each special caption
    position is swapped for the closest tip box attached to it; a special
    position with no attached tip is dropped so the frame fails the count check.
    """
    floor = cfg.min_part_confidence
    clevises = sort_left_to_right([b for b in frame.parts_of(PartKind.CLEVIS) if b.confidence >= floor])
    if cfg.anchor_rule == "clevis_only" or len(clevises) != len(caption.tools):
        return clevises
    if not any(is_special_name(t) for t in caption.tools):
        return clevises
    tips = [b for b in frame.parts_of(PartKind.TIP) if b.confidence >= floor]
    taken: set[int] = set()
    anchors = []
    for clevis, name in zip(clevises, caption.tools):
        if not is_special_name(name):
            anchors.append(clevis)
            continue
        j = _attached_tip(clevis, tips, taken)
        if j is not None:
            taken.add(j)
            anchors.append(tips[j])
    return anchors


@dataclass
class BootstrapResult:
    record: PseudoLabelRecord | None
    skip_reason: str | None = None


def _classify_skip(frame: FrameDetections, caption: ClipCaption, cfg: BootstrapConfig) -> str:
    kinds = (PartKind.CLEVIS, PartKind.TIP)
    anchor_parts = [b for b, k in frame.parts if k in kinds]
    if anchor_parts and all(b.confidence < cfg.min_part_confidence for b in anchor_parts):
        return "low_confidence_only"
    return "wrong_anchor_count"


def bootstrap_frame_result(
    frame: FrameDetections, caption: ClipCaption, cfg: BootstrapConfig
) -> BootstrapResult:
    if len(caption.tools) != cfg.required_tool_count:
        return BootstrapResult(None, "caption_length_mismatch")
    anchors = anchor_boxes(frame, caption, cfg)
    if len(anchors) != cfg.required_tool_count:
        return BootstrapResult(None, _classify_skip(frame, caption, cfg))
    # anchors come back sorted left to right
    entries = tuple(box.with_label(name) for box, name in zip(anchors, caption.tools))
    prov = Provenance(0, "bootstrap", cfg.params())
    return BootstrapResult(PseudoLabelRecord(frame.clip_id, frame.frame_index, entries, prov))


def bootstrap_frame(
    frame: FrameDetections, caption: ClipCaption, cfg: BootstrapConfig
) -> PseudoLabelRecord | None:
    return bootstrap_frame_result(frame, caption, cfg).record


def _zero_skips() -> Counter:
    return Counter({r: 0 for r in SKIP_REASONS})


@dataclass
class BootstrapStats:
    frames_seen: int = 0
    frames_labeled: int = 0
    skips: Counter = field(default_factory=_zero_skips)

    def merge(self, other: BootstrapStats) -> BootstrapStats:
        merged = BootstrapStats(
            self.frames_seen + other.frames_seen, self.frames_labeled + other.frames_labeled
        )
        for r in SKIP_REASONS:
            merged.skips[r] = self.skips[r] + other.skips[r]
        return merged

    def as_dict(self) -> dict:
        return {
            "frames_seen": self.frames_seen,
            "frames_labeled": self.frames_labeled,
            **{r: self.skips[r] for r in SKIP_REASONS},
        }


def _bootstrap_task(args):
    frame, caption, cfg = args
    return bootstrap_frame_result(frame, caption, cfg)


def bootstrap_corpus(
    frames: Iterable[FrameDetections],
    captions: Mapping[str, ClipCaption],
    cfg: BootstrapConfig,
    jobs: int = 1,
) -> tuple[list[PseudoLabelRecord], BootstrapStats]:
    """Bootstrap every frame; records come back ordered by (clip_id, frame_index)."""
    tasks = []
    for frame in frames:
        caption = captions.get(frame.clip_id)
        if caption is None:
            raise ValidationError(f"no caption for clip {frame.clip_id!r}")
        tasks.append((frame, caption, cfg))
    stats = BootstrapStats()
    records = []
    for res in parallel_map(_bootstrap_task, tasks, jobs):
        stats.frames_seen += 1
        if res.record is None:
            stats.skips[res.skip_reason] += 1
        else:
            stats.frames_labeled += 1
            records.append(res.record)
    records.sort(key=lambda r: r.key)
    return records, stats
