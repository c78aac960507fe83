"""Domain vocabulary: part kinds, tool classes, captions, frames, records."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from .errors import RegistryError, ValidationError
from .geometry import Box2D


class PartKind(str, Enum):
    SHAFT = "shaft"
    CLEVIS = "clevis"
    TIP = "tip"


# Classes whose tool boxes are corroborated by tip detections instead of clevis ones.
SPECIAL_LIST = (
    "monopolar curved scissors",
    "tip-up fenestrated grasper",
    "suction irrigator",
    "stapler",
    "grasping retractor",
)

# Instrument classes of the robotic tool-localization challenge data.
DEFAULT_CLASS_NAMES = (
    "needle driver",
    "monopolar curved scissors",
    "force bipolar",
    "clip applier",
    "tip-up fenestrated grasper",
    "cadiere forceps",
    "bipolar forceps",
    "vessel sealer",
    "suction irrigator",
    "bipolar dissector",
    "prograsp forceps",
    "stapler",
    "permanent cautery hook/spatula",
    "grasping retractor",
)

_WS = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    return _WS.sub(" ", name.strip()).casefold()


_SPECIAL_KEYS = frozenset(normalize_name(n) for n in SPECIAL_LIST)


def is_special_name(name: str) -> bool:
    return normalize_name(name) in _SPECIAL_KEYS


@dataclass(frozen=True)
class ToolClass:
    name: str
    id: int
    is_special: bool


class ClassRegistry:
    """Immutable, ordered set of tool classes; ids follow input order."""

    def __init__(self, classes: Iterable[ToolClass]):
        self._classes = tuple(classes)
        self._by_key = {normalize_name(c.name): c for c in self._classes}

    def __len__(self) -> int:
        return len(self._classes)

    def __iter__(self) -> Iterator[ToolClass]:
        return iter(self._classes)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and normalize_name(name) in self._by_key

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ClassRegistry) and self._classes == other._classes

    def __repr__(self) -> str:
        return f"ClassRegistry({[c.name for c in self._classes]})"

    @property
    def names(self) -> list[str]:
        return [c.name for c in self._classes]

    def get(self, name: str) -> ToolClass:
        try:
            return self._by_key[normalize_name(name)]
        except KeyError:
            raise RegistryError(f"unknown tool class {name!r}") from None

    def by_id(self, class_id: int) -> ToolClass:
        if not 0 <= class_id < len(self._classes):
            raise RegistryError(f"class id {class_id} out of range")
        return self._classes[class_id]

    def to_text(self) -> str:
        return "".join(f"{c.name}\n" for c in self._classes)

    @classmethod
    def from_text(cls, text: str) -> ClassRegistry:
        return build_class_registry([ln for ln in text.splitlines() if ln.strip()])


def build_class_registry(names: list[str]) -> ClassRegistry:
    """Assign ids 0..n-1 in input order and flag special classes."""
    if not names:
        raise RegistryError("class registry needs at least one name")
    seen: dict[str, str] = {}
    classes = []
    for i, name in enumerate(names):
        clean = _WS.sub(" ", name.strip())
        if not clean:
            raise RegistryError(f"empty class name at position {i}")
        key = normalize_name(clean)
        if key in seen:
            raise RegistryError(f"duplicate class name {name!r} (same as {seen[key]!r})")
        seen[key] = name
        classes.append(ToolClass(clean, i, key in _SPECIAL_KEYS))
    return ClassRegistry(classes)


def default_registry() -> ClassRegistry:
    return build_class_registry(list(DEFAULT_CLASS_NAMES))


@dataclass(frozen=True)
class ClipCaption:
    clip_id: str
    tools: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.tools:
            raise ValidationError(f"caption for clip {self.clip_id!r} is empty")


@dataclass
class FrameDetections:
    clip_id: str
    frame_index: int
    parts: list[tuple[Box2D, PartKind]] = field(default_factory=list)
    tools: list[Box2D] = field(default_factory=list)
    # Digest of the dataset the tools detector was trained on, when declared.
    train_digest: str | None = None

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValidationError(f"negative frame index {self.frame_index}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.clip_id, self.frame_index)

    def parts_of(self, kind: PartKind) -> list[Box2D]:
        return [b for b, k in self.parts if k is kind]


@dataclass(frozen=True)
class Provenance:
    round: int
    stage: str
    params: tuple[tuple[str, object], ...] = ()

    def as_dict(self) -> dict:
        return {"round": self.round, "stage": self.stage, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> Provenance:
        return cls(int(d["round"]), str(d["stage"]), tuple(sorted(d.get("params", {}).items())))


@dataclass(frozen=True)
class PseudoLabelRecord:
    """An accepted frame: tool boxes whose ``label`` holds the assigned class name."""

    clip_id: str
    frame_index: int
    entries: tuple[Box2D, ...]
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValidationError(f"record {self.clip_id}/{self.frame_index} has no entries")
        if any(e.label is None for e in self.entries):
            raise ValidationError(f"record {self.clip_id}/{self.frame_index} has an unlabeled entry")

    @property
    def key(self) -> tuple[str, int]:
        return (self.clip_id, self.frame_index)


def check_against_caption(record: PseudoLabelRecord, caption: ClipCaption) -> None:
    allowed = {normalize_name(t) for t in caption.tools}
    for e in record.entries:
        if normalize_name(e.label) not in allowed:
            raise ValidationError(
                f"record {record.clip_id}/{record.frame_index}: class {e.label!r} not in caption"
            )
