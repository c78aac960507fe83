"""Synthetic scenes, noisy detector emulators and a trainable surrogate tools detector.

Randomness is counter-based: every frame draws from its own generator seeded
by ``(seed, stream, clip number, frame index)``. Frames can therefore be made
in any order or in parallel with identical results. The surrogate detector
draws the same numbers for a frame in every round, so two rounds differ only
through what the detector learned.

Instrument geometry (image y grows downward)::

        +---+        tip, distal end
      +-------+
      | clevis|      hinge; anchor for non-special classes
      +-------+
        |   |        shaft, down to the image border
        |   |
"""

from __future__ import annotations

import math
import zlib
from functools import cached_property
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import TrainingError, ValidationError
from .eval import match_greedy
from .geometry import Box2D, union_box
from .model import (
    ClassRegistry,
    ClipCaption,
    FrameDetections,
    PartKind,
    PseudoLabelRecord,
    default_registry,
)

# stream tags keep the per-purpose generators independent
_CLIP, _FRAME, _PARTS, _TOOLS, _SURROGATE = 11, 13, 17, 19, 23

PART_ORDER = (PartKind.SHAFT, PartKind.CLEVIS, PartKind.TIP)


def frame_rng(seed: int, stream: int, clip_id: str, frame_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, zlib.crc32(clip_id.encode()), frame_index])


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (1280, 720)
    # probability of each tool count per clip
    tools_per_frame: tuple[tuple[int, float], ...] = ((3, 1.0),)
    crossing_prob: float = 0.2
    special_fraction: float = 0.35
    frames_per_clip: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValidationError(f"image size must be positive, got {w}x{h}")
        for name in ("crossing_prob", "special_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} {v} outside [0, 1]")
        counts = [n for n, _ in self.tools_per_frame]
        probs = [p for _, p in self.tools_per_frame]
        if not counts or any(n not in (1, 2, 3) for n in counts):
            raise ValidationError("tools_per_frame must be over {1, 2, 3}")
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ValidationError("tools_per_frame probabilities must sum to 1")
        if self.frames_per_clip < 1:
            raise ValidationError("frames_per_clip must be >= 1")

    @classmethod
    def fixed_count(cls, n: int, **kw) -> SceneSpec:
        return cls(tools_per_frame=((n, 1.0),), **kw)


@dataclass(frozen=True)
class GroundTruthInstrument:
    tool_class: str
    is_special: bool
    parts: tuple[tuple[PartKind, Box2D], ...]
    slot: int

    def part(self, kind: PartKind) -> Box2D | None:
        for k, b in self.parts:
            if k is kind:
                return b
        return None

    @cached_property
    def tool_box(self) -> Box2D:
        return union_box((b for _, b in self.parts), self.tool_class)

    @cached_property
    def anchor_box(self) -> Box2D:
        """The box pseudo-labels localize: the tip for special classes, else the clevis."""
        kind = PartKind.TIP if self.is_special else PartKind.CLEVIS
        return self.part(kind).with_label(self.tool_class, 1.0)


@dataclass(frozen=True)
class GroundTruthFrame:
    clip_id: str
    frame_index: int
    instruments: tuple[GroundTruthInstrument, ...]  # caption order
    crossed: bool
    image_size: tuple[int, int]

    @property
    def key(self) -> tuple[str, int]:
        return (self.clip_id, self.frame_index)

    def spatial_order(self) -> list[str]:
        return [i.tool_class for i in sorted(self.instruments, key=lambda i: i.slot)]

    def targets(self) -> list[Box2D]:
        return [i.anchor_box for i in self.instruments]


def _clip_caption(spec: SceneSpec, registry: ClassRegistry, clip_no: int) -> list[str]:
    rng = np.random.default_rng([spec.seed, _CLIP, clip_no])
    counts = [n for n, _ in spec.tools_per_frame]
    probs = np.array([p for _, p in spec.tools_per_frame])
    n = int(counts[rng.choice(len(counts), p=probs / probs.sum())])
    special = [c.name for c in registry if c.is_special]
    regular = [c.name for c in registry if not c.is_special]
    chosen = []
    for _ in range(n):
        pick_special = rng.random() < spec.special_fraction
        pool = special if (pick_special and special) or not regular else regular
        name = pool[int(rng.integers(len(pool)))]
        pool.remove(name)
        chosen.append(name)
    return chosen


def _arrangement(n: int, crossing_prob: float, rng: np.random.Generator) -> tuple[list[int], bool]:
    """Slot of each caption position; crossed iff the slots are not in caption order."""
    u_cross, u_three, u_pick = rng.random(3)
    slots = list(range(n))
    if n < 2 or u_cross >= crossing_prob:
        return slots, False
    if n == 3 and u_three < crossing_prob:
        # three-way crossing (overall rate crossing_prob**2): nobody keeps their slot
        return ([1, 2, 0] if u_pick < 0.5 else [2, 0, 1]), True
    i = int(u_pick * (n - 1))
    slots[i], slots[i + 1] = slots[i + 1], slots[i]
    return slots, True


def _instrument_parts(dx: float, dy: float, w: float, h: float, height: int) -> tuple:
    clevis = Box2D(dx - w / 2, dy - h / 2, dx + w / 2, dy + h / 2, 1.0, "clevis")
    tip = Box2D(dx - 0.35 * w, dy - 1.2 * h, dx + 0.35 * w, dy - 0.4 * h, 1.0, "tip")
    shaft = Box2D(dx - 0.225 * w, dy + 0.4 * h, dx + 0.225 * w, 0.98 * height, 1.0, "shaft")
    return ((PartKind.SHAFT, shaft), (PartKind.CLEVIS, clevis), (PartKind.TIP, tip))


def _frame(spec, registry, clip_id, clip_no, frame_index, names) -> GroundTruthFrame:
    rng = np.random.default_rng([spec.seed, _FRAME, clip_no, frame_index])
    width, height = spec.image_size
    n = len(names)
    slots, crossed = _arrangement(n, spec.crossing_prob, rng)
    band = width / n
    instruments = []
    for name, slot in zip(names, slots):
        u = rng.random(4)
        size = 0.04 * width + 0.02 * width * u[0]
        w, h = size * (0.9 + 0.2 * u[1]), size
        dx = (slot + 0.5) * band + (u[2] - 0.5) * 0.24 * band
        dy = height * (0.3 + 0.3 * u[3])
        parts = _instrument_parts(dx, dy, w, h, height)
        instruments.append(GroundTruthInstrument(name, registry.get(name).is_special, parts, slot))
    return GroundTruthFrame(clip_id, frame_index, tuple(instruments), crossed, spec.image_size)


def generate_corpus(
    spec: SceneSpec, n_frames: int, registry: ClassRegistry | None = None
) -> tuple[list[GroundTruthFrame], dict[str, ClipCaption]]:
    """Ground-truth frames plus per-clip captions listing tools in mounting order."""
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    registry = registry or default_registry()
    frames, captions = [], {}
    n_clips = -(-n_frames // spec.frames_per_clip)
    for clip_no in range(n_clips):
        clip_id = f"clip{clip_no:05d}"
        names = _clip_caption(spec, registry, clip_no)
        captions[clip_id] = ClipCaption(clip_id, tuple(names))
        start = clip_no * spec.frames_per_clip
        for f in range(min(spec.frames_per_clip, n_frames - start)):
            frames.append(_frame(spec, registry, clip_id, clip_no, f, names))
    return frames, captions


# ------------------------------------------------------------ detector noise


@dataclass(frozen=True)
class DetectorNoise:
    box_jitter_sigma: float = 2.0
    miss_rate: float = 0.03
    false_positive_rate: float = 0.2
    # row-stochastic, rows/columns in registry order; None means identity
    label_confusion: tuple[tuple[float, ...], ...] | None = None
    fp_confidence: tuple[float, float] = (0.05, 0.4)

    def __post_init__(self) -> None:
        if self.box_jitter_sigma < 0:
            raise ValidationError("box_jitter_sigma must be >= 0")
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValidationError(f"miss_rate {self.miss_rate} outside [0, 1]")
        if self.false_positive_rate < 0:
            raise ValidationError("false_positive_rate must be >= 0")
        if self.label_confusion is not None:
            m = np.asarray(self.label_confusion, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValidationError("label_confusion must be a square matrix")
            if (m < 0).any() or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9, rtol=0):
                raise ValidationError("label_confusion rows must be non-negative and sum to 1")

    @classmethod
    def noiseless(cls) -> DetectorNoise:
        return cls(box_jitter_sigma=0.0, miss_rate=0.0, false_positive_rate=0.0)


def _jitter(box: Box2D, offsets: np.ndarray, image_size, label, conf) -> Box2D | None:
    w, h = image_size
    x0 = min(max(box.x_min + offsets[0], 0.0), w)
    y0 = min(max(box.y_min + offsets[1], 0.0), h)
    x1 = min(max(box.x_max + offsets[2], 0.0), w)
    y1 = min(max(box.y_max + offsets[3], 0.0), h)
    if not (x0 < x1 and y0 < y1):
        return None
    return Box2D(float(x0), float(y0), float(x1), float(y1), conf, label)


def _jitter_confidence(offsets: np.ndarray, scale: float = 10.0) -> float:
    rms = math.sqrt(float(offsets @ offsets) / offsets.size)
    return float(math.exp(-rms / scale))


def emulate_parts_detector(
    gt: GroundTruthFrame, noise: DetectorNoise, seed: int = 0
) -> list[tuple[Box2D, PartKind]]:
    """Jittered, partly missed part boxes plus uniform false positives, in shuffled order."""
    rng = frame_rng(seed, _PARTS, gt.clip_id, gt.frame_index)
    out = []
    for inst in sorted(gt.instruments, key=lambda i: i.slot):
        for kind in PART_ORDER:
            true = inst.part(kind)
            u_miss = rng.random()
            offsets = noise.box_jitter_sigma * rng.standard_normal(4)
            if true is None or u_miss < noise.miss_rate:
                continue
            box = _jitter(true, offsets, gt.image_size, kind.value, _jitter_confidence(offsets))
            if box is not None:
                out.append((box, kind))
    width, height = gt.image_size
    lo, hi = noise.fp_confidence
    for _ in range(int(rng.poisson(noise.false_positive_rate))):
        kind = PART_ORDER[int(rng.integers(3))]
        bw, bh = rng.uniform(0.02, 0.07, 2) * width
        x0 = rng.uniform(0, width - bw)
        y0 = rng.uniform(0, height - bh)
        out.append((Box2D(x0, y0, x0 + bw, y0 + bh, float(rng.uniform(lo, hi)), kind.value), kind))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def emulate_tools_detector(
    gt: GroundTruthFrame, noise: DetectorNoise, registry: ClassRegistry, seed: int = 0
) -> list[Box2D]:
    """Untrained tools-detector stand-in: confusion-sampled labels on jittered anchors."""
    rng = frame_rng(seed, _TOOLS, gt.clip_id, gt.frame_index)
    conf = None if noise.label_confusion is None else np.asarray(noise.label_confusion)
    out = []
    for inst in gt.instruments:
        u_miss, u_label = rng.random(2)
        offsets = noise.box_jitter_sigma * rng.standard_normal(4)
        if u_miss < noise.miss_rate:
            continue
        label = inst.tool_class
        if conf is not None:
            row = np.cumsum(conf[registry.get(label).id])
            label = registry.by_id(int(min(np.searchsorted(row, u_label, side="right"), len(row) - 1))).name
        box = _jitter(inst.anchor_box, offsets, gt.image_size, label, _jitter_confidence(offsets))
        if box is not None:
            out.append(box)
    return out


def simulate_detections(
    frames: Iterable[GroundTruthFrame], noise: DetectorNoise, seed: int = 0
) -> list[FrameDetections]:
    return [
        FrameDetections(gt.clip_id, gt.frame_index, emulate_parts_detector(gt, noise, seed))
        for gt in frames
    ]


# ------------------------------------------------------------------ surrogate


@dataclass
class SurrogateDetector:
    """Confusion-model tools detector.

    For an instrument of true class ``c`` the predicted label follows
    ``confusion[c]``, a list of ``(label, probability)``. Box jitter grows as
    the chosen label's probability drops: confidently predicted labels are
    placed tightly, rarely predicted ones loosely.
    """

    confusion: dict[str, list[tuple[str, float]]]
    fallback: list[tuple[str, float]]
    seed: int = 0
    base_sigma: float = 1.5
    confusion_sigma: float = 8.0
    train_digest: str | None = None

    def row(self, true_class: str) -> list[tuple[str, float]]:
        return self.confusion.get(true_class, self.fallback)

    def label_probability(self, true_class: str, label: str) -> float:
        return dict(self.row(true_class)).get(label, 0.0)


def _ordered_row(counts: Mapping[str, int], first: str | None, registry: ClassRegistry) -> list[tuple[str, float]]:
    total = sum(counts.values())
    names = [n for n in registry.names if counts.get(n, 0) > 0]
    if first in names:
        names.remove(first)
        names.insert(0, first)
    return [(n, counts[n] / total) for n in names]


def surrogate_train(
    records: Sequence[PseudoLabelRecord],
    gt_index: Mapping[tuple[str, int], GroundTruthFrame],
    registry: ClassRegistry,
    seed: int = 0,
    train_digest: str | None = None,
    **params,
) -> SurrogateDetector:
    """Fit per-class label distributions from pseudo-labels matched to ground truth.

    Each pseudo-label box is matched to an instrument's anchor box by IOU > 0.5.
    Classes never matched in training predict the overall label distribution.
    """
    if not records:
        raise TrainingError("cannot train on an empty dataset")
    counts: dict[str, Counter] = defaultdict(Counter)
    marginal: Counter = Counter()
    for rec in records:
        gt = gt_index.get(rec.key)
        if gt is None:
            continue
        targets = gt.targets()
        entries = list(rec.entries)
        for i, j, _ in match_greedy(entries, targets, 0.5, inclusive=False).pairs:
            counts[targets[j].label][entries[i].label] += 1
            marginal[entries[i].label] += 1
    if not marginal:
        raise TrainingError("no pseudo-label matches any ground-truth instrument")
    confusion = {c: _ordered_row(counts[c], c, registry) for c in registry.names if c in counts}
    return SurrogateDetector(
        confusion, _ordered_row(marginal, None, registry), seed, train_digest=train_digest, **params
    )


def surrogate_infer(det: SurrogateDetector, gt: GroundTruthFrame) -> list[Box2D]:
    """One labeled, jittered anchor box per true instrument, in left-to-right order."""
    rng = frame_rng(det.seed, _SURROGATE, gt.clip_id, gt.frame_index)
    out = []
    for inst in sorted(gt.instruments, key=lambda i: i.slot):
        u = rng.random()
        z = rng.standard_normal(4)
        row = det.row(inst.tool_class)
        acc = 0.0
        label, p = row[-1]
        for name, prob in row:
            acc += prob
            if u < acc:
                label, p = name, prob
                break
        offsets = (det.base_sigma + det.confusion_sigma * (1.0 - p)) * z
        conf = _jitter_confidence(offsets, scale=20.0)
        box = _jitter(inst.anchor_box, offsets, gt.image_size, label, min(1.0, conf))
        if box is not None:
            out.append(box)
    return out


def surrogate_detections(
    det: SurrogateDetector, frames: Iterable[GroundTruthFrame], parts: Mapping[tuple[str, int], FrameDetections]
) -> list[FrameDetections]:
    """Tools predictions for every frame, merged with that frame's part detections."""
    out = []
    for gt in frames:
        base = parts[gt.key]
        out.append(FrameDetections(gt.clip_id, gt.frame_index, list(base.parts), surrogate_infer(det, gt), det.train_digest))
    return out


def uniform_surrogate(registry: ClassRegistry, seed: int = 0, **params) -> SurrogateDetector:
    k = len(registry)
    row = [(n, 1.0 / k) for n in registry.names]
    confusion = {n: [(n, 1.0 / k)] + [(m, 1.0 / k) for m in registry.names if m != n] for n in registry.names}
    return SurrogateDetector(confusion, row, seed, **params)


# ------------------------------------------------------------- serialization


def gt_to_json(gt: GroundTruthFrame) -> dict:
    return {
        "clip_id": gt.clip_id,
        "frame": gt.frame_index,
        "crossed": gt.crossed,
        "image_size": list(gt.image_size),
        "instruments": [
            {
                "class": inst.tool_class,
                "special": inst.is_special,
                "slot": inst.slot,
                "box": inst.anchor_box.as_list(),
                "tool_box": inst.tool_box.as_list(),
                "parts": [{"kind": k.value, "box": b.as_list()} for k, b in inst.parts],
            }
            for inst in gt.instruments
        ],
    }


def gt_from_json(obj: dict) -> GroundTruthFrame:
    instruments = []
    for inst in obj["instruments"]:
        parts = tuple(
            (PartKind(p["kind"]), Box2D(*p["box"], 1.0, p["kind"])) for p in inst["parts"]
        )
        instruments.append(GroundTruthInstrument(inst["class"], bool(inst["special"]), parts, int(inst["slot"])))
    return GroundTruthFrame(
        obj["clip_id"], int(obj["frame"]), tuple(instruments), bool(obj["crossed"]), tuple(obj["image_size"])
    )


@dataclass
class SimCorpus:
    """Everything the closed loop needs: truth, captions and part detections."""

    spec: SceneSpec
    noise: DetectorNoise
    registry: ClassRegistry
    truth: list[GroundTruthFrame]
    captions: dict[str, ClipCaption]
    detections: list[FrameDetections] = field(default_factory=list)

    @property
    def gt_index(self) -> dict[tuple[str, int], GroundTruthFrame]:
        return {g.key: g for g in self.truth}

    def gt_boxes(self) -> dict[tuple[str, int], list[Box2D]]:
        return {g.key: g.targets() for g in self.truth}


def build_corpus(
    spec: SceneSpec, n_frames: int, noise: DetectorNoise | None = None, registry: ClassRegistry | None = None
) -> SimCorpus:
    registry = registry or default_registry()
    noise = noise or DetectorNoise()
    truth, captions = generate_corpus(spec, n_frames, registry)
    return SimCorpus(spec, noise, registry, truth, captions, simulate_detections(truth, noise, spec.seed))
