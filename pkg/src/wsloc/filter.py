"""Per-frame label filtering by tool/part location consistency.

Every predicted tool box must be corroborated by a part box of the kind its
class dictates: tip boxes for the special classes, clevis boxes otherwise. A
frame is kept only when the corroboration count equals the number of tools.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ._parallel import parallel_map
from .errors import ValidationError
from .geometry import Box2D, overlap_fn
from .model import ClassRegistry, FrameDetections, PartKind, Provenance, PseudoLabelRecord, is_special_name

MATCH_MODES = ("capped", "literal")
REJECT_REASONS = ("count_mismatch", "no_tools", "low_confidence_empty")


@dataclass(frozen=True)
class FilterConfig:
    tau: float = 0.8
    overlap_metric: str = "iou"
    match_mode: str = "capped"
    min_tool_confidence: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")
        overlap_fn(self.overlap_metric)
        if self.match_mode not in MATCH_MODES:
            raise ValidationError(f"match_mode must be one of {MATCH_MODES}, got {self.match_mode!r}")
        if not 0.0 <= self.min_tool_confidence <= 1.0:
            raise ValidationError(f"min_tool_confidence {self.min_tool_confidence} outside [0, 1]")

    def params(self) -> tuple:
        return tuple(sorted(
            {
                "tau": self.tau,
                "overlap_metric": self.overlap_metric,
                "match_mode": self.match_mode,
                "min_tool_confidence": self.min_tool_confidence,
            }.items()
        ))


def dispatch_kind(tool: Box2D, registry: ClassRegistry | None = None) -> PartKind:
    special = registry.get(tool.label).is_special if registry is not None else is_special_name(tool.label)
    return PartKind.TIP if special else PartKind.CLEVIS


def match_count(
    tool: Box2D,
    parts: Sequence[tuple[Box2D, PartKind]],
    cfg: FilterConfig,
    registry: ClassRegistry | None = None,
) -> int:
    """Number of dispatch-kind parts overlapping ``tool`` strictly above tau.

    ``capped`` mode counts a tool at most once.
    """
    kind = dispatch_kind(tool, registry)
    overlap = overlap_fn(cfg.overlap_metric)
    n = sum(1 for box, k in parts if k is kind and overlap(box, tool) > cfg.tau)
    return min(n, 1) if cfg.match_mode == "capped" else n


@dataclass
class FilterResult:
    record: PseudoLabelRecord | None
    reason: str | None = None
    select_cnt: int = 0


def filter_frame_result(
    frame: FrameDetections,
    cfg: FilterConfig,
    registry: ClassRegistry,
    round_index: int = 1,
) -> FilterResult:
    if not frame.tools:
        return FilterResult(None, "no_tools")
    for t in frame.tools:
        registry.get(t.label)
    tools = [t for t in frame.tools if t.confidence >= cfg.min_tool_confidence]
    if not tools:
        return FilterResult(None, "low_confidence_empty")
    select_cnt = sum(match_count(t, frame.parts, cfg, registry) for t in tools)
    if select_cnt != len(tools):
        return FilterResult(None, "count_mismatch", select_cnt)
    entries = tuple(t.with_label(registry.get(t.label).name) for t in tools)
    prov = Provenance(round_index, "filter", cfg.params())
    return FilterResult(PseudoLabelRecord(frame.clip_id, frame.frame_index, entries, prov), None, select_cnt)


def filter_frame(
    frame: FrameDetections, cfg: FilterConfig, registry: ClassRegistry, round_index: int = 1
) -> PseudoLabelRecord | None:
    """Return the frame's record if every kept tool is corroborated, else None."""
    return filter_frame_result(frame, cfg, registry, round_index).record


def _zero_reasons() -> Counter:
    return Counter({r: 0 for r in REJECT_REASONS})


@dataclass
class FilterStats:
    frames_seen: int = 0
    frames_accepted: int = 0
    rejections: Counter = field(default_factory=_zero_reasons)
    per_class: Counter = field(default_factory=Counter)

    def merge(self, other: FilterStats) -> FilterStats:
        rejections = _zero_reasons()
        rejections.update(self.rejections)
        rejections.update(other.rejections)
        per_class = Counter(self.per_class)
        per_class.update(other.per_class)
        return FilterStats(
            self.frames_seen + other.frames_seen,
            self.frames_accepted + other.frames_accepted,
            rejections,
            per_class,
        )

    def per_class_counts(self, registry: ClassRegistry) -> dict[str, int]:
        return {name: self.per_class.get(name, 0) for name in registry.names}

    def rejection_dict(self) -> dict[str, int]:
        return {r: self.rejections.get(r, 0) for r in REJECT_REASONS}


def _filter_task(args):
    frame, cfg, registry, round_index = args
    return filter_frame_result(frame, cfg, registry, round_index)


def filter_corpus(
    frames: Iterable[FrameDetections],
    cfg: FilterConfig,
    registry: ClassRegistry,
    round_index: int = 1,
    jobs: int = 1,
) -> tuple[list[PseudoLabelRecord], FilterStats]:
    """Filter every frame; records come back ordered by (clip_id, frame_index)."""
    tasks = [(f, cfg, registry, round_index) for f in frames]
    stats = FilterStats()
    records = []
    for res in parallel_map(_filter_task, tasks, jobs):
        stats.frames_seen += 1
        if res.record is None:
            stats.rejections[res.reason] += 1
            continue
        stats.frames_accepted += 1
        stats.per_class.update(e.label for e in res.record.entries)
        records.append(res.record)
    records.sort(key=lambda r: r.key)
    return records, stats
