"""File formats: detection streams in, pseudo-label datasets and round manifests out.

Detections are line-delimited JSON, one frame per line::

    {"clip_id": "clip0001", "frame": 3,
     "parts": [{"kind": "clevis", "box": [x0, y0, x1, y1], "conf": 0.9}, ...],
     "tools": [{"class": "stapler", "box": [...], "conf": 0.8}, ...]}

``tools`` may be absent before the first tools detector exists. Pseudo-label
datasets are exported as one ``<clip_id>_<frame:06d>.txt`` per frame holding
``class cx cy w h`` lines normalized by the image size, plus ``classes.txt``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import IntegrityError, SchemaError, ValidationError
from .geometry import Box2D
from .model import (
    ClassRegistry,
    ClipCaption,
    FrameDetections,
    PartKind,
    Provenance,
    PseudoLabelRecord,
)

LABELS_DIR = "labels"
CLASSES_FILE = "classes.txt"
RECORDS_FILE = "records.jsonl"


def _require_file(path: os.PathLike | str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"file not found: {p}")
    return p


# ---------------------------------------------------------------- detections


def parse_box(raw, conf, label, line: int | None, fld: str) -> Box2D:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise SchemaError("box must be a list of 4 numbers", line, fld)
    try:
        coords = [float(v) for v in raw]
        conf = 1.0 if conf is None else float(conf)
    except (TypeError, ValueError):
        raise SchemaError("box and conf must be numeric", line, fld) from None
    if not all(math.isfinite(c) for c in coords):
        raise SchemaError("box coordinates must be finite", line, fld)
    if not 0.0 <= conf <= 1.0:
        raise SchemaError(f"confidence {conf} outside [0, 1]", line, fld + ".conf")
    if not (coords[0] < coords[2] and coords[1] < coords[3]):
        raise SchemaError(f"degenerate box {coords}", line, fld + ".box")
    return Box2D(*coords, confidence=conf, label=label)


def frame_from_json(obj: dict, line: int | None = None) -> FrameDetections:
    if not isinstance(obj, dict):
        raise SchemaError("frame record must be a JSON object", line)
    for key in ("clip_id", "frame"):
        if key not in obj:
            raise SchemaError("missing required key", line, key)
    clip_id = obj["clip_id"]
    frame = obj["frame"]
    if not isinstance(clip_id, str) or not clip_id:
        raise SchemaError("clip_id must be a non-empty string", line, "clip_id")
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
        raise SchemaError("frame must be a non-negative integer", line, "frame")
    parts = []
    for i, p in enumerate(obj.get("parts", [])):
        fld = f"parts[{i}]"
        if not isinstance(p, dict):
            raise SchemaError("part must be an object", line, fld)
        try:
            kind = PartKind(p.get("kind"))
        except ValueError:
            raise SchemaError(f"unknown part kind {p.get('kind')!r}", line, fld + ".kind") from None
        parts.append((parse_box(p.get("box"), p.get("conf"), kind.value, line, fld), kind))
    tools = []
    for i, t in enumerate(obj.get("tools") or []):
        fld = f"tools[{i}]"
        if not isinstance(t, dict):
            raise SchemaError("tool must be an object", line, fld)
        cls = t.get("class")
        if not isinstance(cls, str) or not cls.strip():
            raise SchemaError("tool class must be a non-empty string", line, fld + ".class")
        tools.append(parse_box(t.get("box"), t.get("conf"), cls, line, fld))
    digest = obj.get("train_digest")
    if digest is not None and not isinstance(digest, str):
        raise SchemaError("train_digest must be a string", line, "train_digest")
    return FrameDetections(clip_id, frame, parts, tools, digest)


def frame_to_json(frame: FrameDetections, include_tools: bool = True) -> dict:
    obj: dict = {
        "clip_id": frame.clip_id,
        "frame": frame.frame_index,
        "parts": [
            {"kind": kind.value, "box": box.as_list(), "conf": box.confidence}
            for box, kind in frame.parts
        ],
    }
    if include_tools:
        obj["tools"] = [
            {"class": t.label, "box": t.as_list(), "conf": t.confidence} for t in frame.tools
        ]
    if frame.train_digest is not None:
        obj["train_digest"] = frame.train_digest
    return obj


def read_jsonl(path: os.PathLike | str) -> Iterator[tuple[int, dict]]:
    p = _require_file(path)
    with p.open(encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                yield lineno, json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None


def read_detections(path: os.PathLike | str) -> Iterator[FrameDetections]:
    """Yield frames in file order; schema problems raise with the line number."""
    for lineno, obj in read_jsonl(path):
        yield frame_from_json(obj, lineno)


def write_jsonl(objs: Iterable[dict], path: os.PathLike | str) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
            n += 1
    return n


def write_detections(
    frames: Iterable[FrameDetections], path: os.PathLike | str, include_tools: bool = True
) -> int:
    return write_jsonl((frame_to_json(f, include_tools) for f in frames), path)


# ------------------------------------------------------------------ captions


def read_captions(path: os.PathLike | str, registry: ClassRegistry) -> dict[str, ClipCaption]:
    """Parse ``clip_id,tool_1,...,tool_k`` rows; an optional header row is skipped."""
    p = _require_file(path)
    captions: dict[str, ClipCaption] = {}
    with p.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not any(c.strip() for c in row):
                continue
            clip_id = row[0].strip()
            if lineno == 1 and clip_id.casefold() == "clip_id":
                continue
            if not clip_id:
                raise SchemaError("empty clip_id", lineno, "clip_id")
            cells = [c.strip() for c in row[1:]]
            while cells and not cells[-1]:
                cells.pop()
            if any(not c for c in cells):
                raise SchemaError("empty cell before the last tool", lineno)
            if not cells:
                raise SchemaError("caption lists no tools", lineno)
            if clip_id in captions:
                raise SchemaError(f"duplicate clip_id {clip_id!r}", lineno, "clip_id")
            names = []
            for i, c in enumerate(cells, start=1):
                if c not in registry:
                    raise SchemaError(f"unknown class {c!r}", lineno, f"tool_{i}")
                names.append(registry.get(c).name)
            captions[clip_id] = ClipCaption(clip_id, tuple(names))
    return captions


def write_captions(captions: Iterable[ClipCaption], path: os.PathLike | str) -> None:
    caps = list(captions)
    k = max((len(c.tools) for c in caps), default=1)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id"] + [f"tool_{i}" for i in range(1, k + 1)])
        for c in caps:
            w.writerow([c.clip_id, *c.tools] + [""] * (k - len(c.tools)))


def read_classes(path: os.PathLike | str) -> ClassRegistry:
    return ClassRegistry.from_text(_require_file(path).read_text(encoding="utf-8"))


def write_classes(registry: ClassRegistry, path: os.PathLike | str) -> None:
    Path(path).write_text(registry.to_text(), encoding="utf-8")


# ---------------------------------------------------------- pseudo datasets


def annotation_filename(clip_id: str, frame_index: int) -> str:
    return f"{clip_id}_{frame_index:06d}.txt"


def annotation_line(box: Box2D, class_id: int, image_size: tuple[int, int]) -> str:
    width, height = image_size
    if not box.within(width, height):
        raise ValidationError(f"box {box.as_list()} exceeds image bounds {width}x{height}")
    cx, cy = box.center
    return (
        f"{class_id} {cx / width:.6f} {cy / height:.6f} "
        f"{box.width / width:.6f} {box.height / height:.6f}\n"
    )


def render_annotations(
    record: PseudoLabelRecord, registry: ClassRegistry, image_size: tuple[int, int]
) -> str:
    return "".join(
        annotation_line(e, registry.get(e.label).id, image_size) for e in record.entries
    )


def _check_image_size(image_size) -> tuple[int, int]:
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValidationError(f"image size must be positive, got {w}x{h}")
    return int(w), int(h)


def write_pseudo_dataset(
    records: Iterable[PseudoLabelRecord],
    image_size: tuple[int, int],
    path: os.PathLike | str,
    registry: ClassRegistry,
) -> dict:
    """Write annotation files, ``classes.txt`` and a lossless ``records.jsonl``.

    Returns summary counts ``{"frames", "objects"}``. Any box outside the image
    aborts the write; nothing is clamped.
    """
    image_size = _check_image_size(image_size)
    records = list(records)
    rendered = [(annotation_filename(r.clip_id, r.frame_index), render_annotations(r, registry, image_size)) for r in records]
    names = [n for n, _ in rendered]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate (clip_id, frame) in pseudo dataset")
    root = Path(path)
    labels = root / LABELS_DIR
    try:
        labels.mkdir(parents=True, exist_ok=True)
        for stale in labels.glob("*.txt"):
            stale.unlink()
        for name, text in rendered:
            (labels / name).write_text(text, encoding="utf-8")
        write_classes(registry, root / CLASSES_FILE)
        write_records(records, root / RECORDS_FILE)
    except OSError as exc:
        raise ValidationError(f"cannot write pseudo dataset to {root}: {exc}") from exc
    return {"frames": len(records), "objects": sum(len(r.entries) for r in records)}


def _snap(v: float, limit: float) -> float:
    # six-decimal quantization can push an edge box a hair outside the image
    tol = 1e-6 * limit
    if -tol <= v < 0:
        return 0.0
    if limit < v <= limit + tol:
        return float(limit)
    return v


def read_pseudo_dataset(
    path: os.PathLike | str, image_size: tuple[int, int], registry: ClassRegistry | None = None
) -> list[PseudoLabelRecord]:
    """Rebuild records from annotation files (precision limited to the format)."""
    width, height = _check_image_size(image_size)
    root = Path(path)
    registry = registry or read_classes(root / CLASSES_FILE)
    records = []
    for f in sorted((root / LABELS_DIR).glob("*.txt")):
        clip_id, _, frame = f.stem.rpartition("_")
        entries = []
        for lineno, text in enumerate(f.read_text(encoding="utf-8").splitlines(), start=1):
            fields = text.split()
            if len(fields) != 5:
                raise SchemaError(f"{f.name}: expected 5 fields", lineno)
            cid = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
            x0, x1 = _snap((cx - w / 2) * width, width), _snap((cx + w / 2) * width, width)
            y0, y1 = _snap((cy - h / 2) * height, height), _snap((cy + h / 2) * height, height)
            entries.append(Box2D(x0, y0, x1, y1, 1.0, registry.by_id(cid).name))
        records.append(PseudoLabelRecord(clip_id, int(frame), tuple(entries), Provenance(-1, "import")))
    return records


def record_to_json(r: PseudoLabelRecord) -> dict:
    return {
        "clip_id": r.clip_id,
        "frame": r.frame_index,
        "entries": [{"class": e.label, "box": e.as_list(), "conf": e.confidence} for e in r.entries],
        "provenance": r.provenance.as_dict(),
    }


def record_from_json(obj: dict, line: int | None = None) -> PseudoLabelRecord:
    entries = tuple(
        parse_box(e.get("box"), e.get("conf"), e.get("class"), line, f"entries[{i}]")
        for i, e in enumerate(obj.get("entries", []))
    )
    return PseudoLabelRecord(
        obj["clip_id"], int(obj["frame"]), entries, Provenance.from_dict(obj["provenance"])
    )


def write_records(records: Iterable[PseudoLabelRecord], path: os.PathLike | str) -> int:
    return write_jsonl((record_to_json(r) for r in records), path)


def read_records(path: os.PathLike | str) -> list[PseudoLabelRecord]:
    return [record_from_json(obj, lineno) for lineno, obj in read_jsonl(path)]


def dataset_digest(
    records: Iterable[PseudoLabelRecord], registry: ClassRegistry, image_size: tuple[int, int]
) -> str:
    """Content hash of a dataset as exported: class list plus every annotation file."""
    h = hashlib.sha256()
    h.update(registry.to_text().encode())
    for r in sorted(records, key=lambda r: r.key):
        h.update(b"\x00" + annotation_filename(r.clip_id, r.frame_index).encode() + b"\x00")
        h.update(render_annotations(r, registry, image_size).encode())
    return "sha256:" + h.hexdigest()


def directory_digest(path: os.PathLike | str) -> str:
    """Content hash of an exported dataset directory; equals ``dataset_digest``."""
    root = Path(path)
    h = hashlib.sha256()
    h.update((root / CLASSES_FILE).read_bytes())
    for f in sorted((root / LABELS_DIR).glob("*.txt")):
        h.update(b"\x00" + f.name.encode() + b"\x00")
        h.update(f.read_bytes())
    return "sha256:" + h.hexdigest()


def digest_json(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return "sha256:" + hashlib.sha256(payload).hexdigest()


# ----------------------------------------------------------------- manifests


@dataclass
class RoundManifest:
    """Provenance of one round. ``digest`` seals every other field."""

    round: int
    tau: float
    overlap_metric: str
    frames_seen: int
    frames_accepted: int
    per_class_counts: dict[str, int]
    input_digest: str
    output_path: str
    output_digest: str = ""
    stage: str = "filter"
    params: dict = field(default_factory=dict)
    stats: dict[str, int] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    digest: str = ""

    def validate(self) -> None:
        if self.round < 0:
            raise ValidationError(f"manifest round {self.round} is negative")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"manifest tau {self.tau} outside (0, 1)")
        if self.overlap_metric not in ("iou", "iomin"):
            raise ValidationError(f"manifest overlap_metric {self.overlap_metric!r} invalid")
        if self.frames_seen < 0 or self.frames_accepted < 0:
            raise ValidationError("manifest frame counts must be non-negative")
        if self.frames_accepted > self.frames_seen:
            raise ValidationError("manifest frames_accepted exceeds frames_seen")
        if any(v < 0 for v in self.per_class_counts.values()):
            raise ValidationError("manifest per-class counts must be non-negative")

    def body(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("digest")
        return d

    def compute_digest(self) -> str:
        return digest_json(self.body())

    def sealed(self) -> RoundManifest:
        return dataclasses.replace(self, digest=self.compute_digest())

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def manifest_text(manifest: RoundManifest) -> str:
    return json.dumps(manifest.to_json(), indent=2) + "\n"


def write_manifest(manifest: RoundManifest, path: os.PathLike | str) -> RoundManifest:
    manifest.validate()
    sealed = manifest.sealed()
    Path(path).write_text(manifest_text(sealed), encoding="utf-8")
    return sealed


def read_manifest(path: os.PathLike | str) -> RoundManifest:
    p = _require_file(path)
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{p}: manifest is not valid JSON ({exc.msg})") from None
    names = {f.name for f in dataclasses.fields(RoundManifest)}
    if not isinstance(obj, dict) or set(obj) != names:
        raise IntegrityError(f"{p}: manifest keys do not match the manifest schema")
    manifest = RoundManifest(**obj)
    manifest.validate()
    if manifest.digest != manifest.compute_digest():
        raise IntegrityError(f"{p}: manifest digest mismatch")
    return manifest
