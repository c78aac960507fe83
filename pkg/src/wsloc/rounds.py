"""Multi-round orchestration: bootstrap, then train -> infer -> filter per round.

Each round persists under ``<workdir>/round_<k>/``::

    labels/*.txt      annotation files
    classes.txt       class list, line number = id
    records.jsonl     lossless copy of the records (used to resume)
    manifest.json     parameters, statistics and content digests

The manifest is written last. A round whose manifest, inputs and outputs all
check out is reused on the next invocation instead of recomputed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import io
from .bootstrap import BootstrapConfig, bootstrap_corpus
from .errors import IntegrityError, PipelineStateError, StalenessError, ValidationError
from .eval import AP_INTERPOLATION, evaluate_map, label_quality
from .filter import FilterConfig, filter_corpus
from .model import ClassRegistry, ClipCaption, FrameDetections, PseudoLabelRecord
from .sim import (
    DetectorNoise,
    SceneSpec,
    SimCorpus,
    SurrogateDetector,
    build_corpus,
    surrogate_detections,
    surrogate_train,
)

log = logging.getLogger(__name__)

DETECTOR_KINDS = ("surrogate", "file")


@dataclass(frozen=True)
class SimPlan:
    frames: int = 5000
    scene: SceneSpec = SceneSpec()
    noise: DetectorNoise = DetectorNoise()


@dataclass(frozen=True)
class FileInputs:
    detections: str
    captions: str
    classes: str
    image_size: tuple[int, int]


@dataclass(frozen=True)
class RoundPlan:
    rounds: int
    workdir: str
    seed: int = 0
    detector: str = "surrogate"
    filter_cfg: FilterConfig = FilterConfig()
    bootstrap_cfg: BootstrapConfig = BootstrapConfig()
    sim: SimPlan = SimPlan()
    inputs: FileInputs | None = None
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if self.detector not in DETECTOR_KINDS:
            raise ValidationError(f"detector must be one of {DETECTOR_KINDS}, got {self.detector!r}")
        if self.detector == "file" and self.inputs is None:
            raise ValidationError("file-backed detector needs detections, captions and classes inputs")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        if self.sim.scene.seed != self.seed:
            # the plan seed drives the scene; keep one source of truth
            scene = dataclasses.replace(self.sim.scene, seed=self.seed)
            object.__setattr__(self, "sim", dataclasses.replace(self.sim, scene=scene))

    def to_json(self) -> dict:
        d = {
            "rounds": self.rounds,
            "workdir": str(self.workdir),
            "seed": self.seed,
            "detector": self.detector,
            "filter": dataclasses.asdict(self.filter_cfg),
            "bootstrap": dataclasses.asdict(self.bootstrap_cfg),
        }
        if self.detector == "surrogate":
            d["sim"] = {
                "frames": self.sim.frames,
                "scene": _scene_json(self.sim.scene),
                "noise": dataclasses.asdict(self.sim.noise),
            }
        if self.inputs is not None:
            d["inputs"] = dataclasses.asdict(self.inputs)
        return d

    @classmethod
    def from_json(cls, obj: Mapping, **overrides) -> RoundPlan:
        try:
            sim_obj = obj.get("sim", {})
            scene = dict(sim_obj.get("scene", {}))
            if "image_size" in scene:
                scene["image_size"] = tuple(scene["image_size"])
            if "tools_per_frame" in scene:
                tpf = scene["tools_per_frame"]
                items = tpf.items() if isinstance(tpf, Mapping) else tpf
                scene["tools_per_frame"] = tuple((int(n), float(p)) for n, p in items)
            seed = overrides.get("seed", obj.get("seed", 0))
            scene["seed"] = seed
            noise = dict(sim_obj.get("noise", {}))
            if noise.get("label_confusion") is not None:
                noise["label_confusion"] = tuple(tuple(r) for r in noise["label_confusion"])
            if "fp_confidence" in noise:
                noise["fp_confidence"] = tuple(noise["fp_confidence"])
            inputs = None
            if obj.get("inputs"):
                raw = dict(obj["inputs"])
                raw["image_size"] = tuple(raw["image_size"])
                inputs = FileInputs(**raw)
            kwargs = dict(
                rounds=int(obj["rounds"]),
                workdir=str(obj.get("workdir", ".")),
                seed=int(seed),
                detector=obj.get("detector", "surrogate"),
                filter_cfg=FilterConfig(**obj.get("filter", {})),
                bootstrap_cfg=BootstrapConfig(**obj.get("bootstrap", {})),
                sim=SimPlan(int(sim_obj.get("frames", 5000)), SceneSpec(**scene), DetectorNoise(**noise)),
                inputs=inputs,
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"invalid plan: {exc}") from exc
        kwargs.update(overrides)
        return cls(**kwargs)


def _scene_json(scene: SceneSpec) -> dict:
    d = dataclasses.asdict(scene)
    d["tools_per_frame"] = [list(t) for t in scene.tools_per_frame]
    d["image_size"] = list(scene.image_size)
    return d


# ------------------------------------------------------------ detector sources


class DetectorSource:
    """Stand-in for the trained tools detector of one round."""

    def fit(self, round_index: int, records: Sequence[PseudoLabelRecord], digest: str) -> None:
        raise NotImplementedError

    def detect(self, frames: Sequence[FrameDetections]) -> list[FrameDetections]:
        raise NotImplementedError

    def quality(self, records: Sequence[PseudoLabelRecord], digest: str) -> dict:
        """Metrics needing ground truth; empty when none is available."""
        return {}


class SurrogateSource(DetectorSource):
    def __init__(self, corpus: SimCorpus, seed: int):
        self.corpus = corpus
        self.seed = seed
        self._parts = {d.key: d for d in corpus.detections}
        self._gt_index = corpus.gt_index
        self._gt_boxes = corpus.gt_boxes()
        self._cache: dict[str, tuple[SurrogateDetector, list[FrameDetections]]] = {}
        self._current: str | None = None

    def _trained(self, records, digest):
        if digest not in self._cache:
            det = surrogate_train(records, self._gt_index, self.corpus.registry, self.seed, digest)
            self._cache[digest] = (det, surrogate_detections(det, self.corpus.truth, self._parts))
        return self._cache[digest]

    def fit(self, round_index, records, digest):
        self._trained(records, digest)
        self._current = digest

    def detect(self, frames):
        _, detections = self._cache[self._current]
        by_key = {d.key: d for d in detections}
        return [by_key[f.key] for f in frames]

    def quality(self, records, digest):
        q = label_quality(records, self._gt_boxes)
        _, detections = self._trained(records, digest)
        report = evaluate_map({d.key: d.tools for d in detections}, self._gt_boxes)
        return {
            "label_precision": q.precision,
            "label_recall": q.recall,
            "labels_emitted": q.emitted,
            "labels_correct": q.correct,
            "detector_map": report.map,
            "detector_map_per_threshold": report.per_threshold,
            "ap_interpolation": AP_INTERPOLATION,
        }


class FileSource(DetectorSource):
    """Reads ``round_<k>/detections.jsonl`` written by an external trainer."""

    def __init__(self, workdir: Path):
        self.workdir = workdir
        self._path: Path | None = None
        self._digest: str | None = None

    def fit(self, round_index, records, digest):
        path = self.workdir / f"round_{round_index}" / "detections.jsonl"
        if not path.is_file():
            raise PipelineStateError(
                f"{path} not found; train the tools detector on round_{round_index - 1} "
                f"(digest {digest}) and write its detections there"
            )
        self._path, self._digest = path, digest

    def detect(self, frames):
        tools: dict[tuple[str, int], FrameDetections] = {}
        for det in io.read_detections(self._path):
            if det.train_digest != self._digest:
                raise StalenessError(
                    f"{self._path}: frame {det.clip_id}/{det.frame_index} declares training digest "
                    f"{det.train_digest!r}, expected {self._digest!r}"
                )
            tools[det.key] = det
        out = []
        for f in frames:
            d = tools.get(f.key)
            out.append(FrameDetections(f.clip_id, f.frame_index, list(f.parts), list(d.tools) if d else [], self._digest))
        return out


# -------------------------------------------------------------------- context


@dataclass
class RoundContext:
    registry: ClassRegistry
    frames: list[FrameDetections]
    captions: dict[str, ClipCaption]
    image_size: tuple[int, int]
    source: DetectorSource
    corpus: SimCorpus | None = None
    inventory_digest: str = ""


def _inventory_digest(frames, captions, registry) -> str:
    return io.digest_json(
        {
            "classes": registry.names,
            "captions": {k: list(c.tools) for k, c in sorted(captions.items())},
            "frames": [io.frame_to_json(f, include_tools=False) for f in frames],
        }
    )


def build_context(plan: RoundPlan) -> RoundContext:
    workdir = Path(plan.workdir)
    if plan.detector == "surrogate":
        scene = plan.sim.scene
        corpus = build_corpus(scene, plan.sim.frames, plan.sim.noise)
        frames = corpus.detections
        ctx = RoundContext(
            corpus.registry, frames, corpus.captions, scene.image_size, SurrogateSource(corpus, plan.seed), corpus
        )
    else:
        registry = io.read_classes(plan.inputs.classes)
        captions = io.read_captions(plan.inputs.captions, registry)
        frames = sorted(io.read_detections(plan.inputs.detections), key=lambda f: f.key)
        ctx = RoundContext(registry, frames, captions, plan.inputs.image_size, FileSource(workdir))
    ctx.inventory_digest = _inventory_digest(ctx.frames, ctx.captions, ctx.registry)
    return ctx


def round_dir(plan: RoundPlan, k: int) -> Path:
    return Path(plan.workdir) / f"round_{k}"


def _params(plan: RoundPlan, stage: str) -> dict:
    p = {"seed": plan.seed, "detector": plan.detector}
    p.update(dict(plan.bootstrap_cfg.params() if stage == "bootstrap" else plan.filter_cfg.params()))
    return p


def _persist(plan, ctx, k, records, manifest) -> RoundManifest:
    out = round_dir(plan, k)
    io.write_pseudo_dataset(records, ctx.image_size, out, ctx.registry)
    return io.write_manifest(manifest, out / "manifest.json")


RoundManifest = io.RoundManifest


def run_bootstrap_round(plan: RoundPlan, ctx: RoundContext) -> tuple[list[PseudoLabelRecord], RoundManifest]:
    records, stats = bootstrap_corpus(ctx.frames, ctx.captions, plan.bootstrap_cfg, plan.jobs)
    digest = io.dataset_digest(records, ctx.registry, ctx.image_size)
    per_class = {n: 0 for n in ctx.registry.names}
    for r in records:
        for e in r.entries:
            per_class[e.label] += 1
    manifest = RoundManifest(
        round=0,
        tau=plan.filter_cfg.tau,
        overlap_metric=plan.filter_cfg.overlap_metric,
        frames_seen=stats.frames_seen,
        frames_accepted=stats.frames_labeled,
        per_class_counts=per_class,
        input_digest=ctx.inventory_digest,
        output_path="round_0",
        output_digest=digest,
        stage="bootstrap",
        params=_params(plan, "bootstrap"),
        stats={k: v for k, v in stats.as_dict().items() if k not in ("frames_seen", "frames_labeled")},
        metrics=ctx.source.quality(records, digest) if records else {},
    )
    return records, _persist(plan, ctx, 0, records, manifest)


def run_round(
    k: int, prior: Sequence[PseudoLabelRecord], prior_digest: str, plan: RoundPlan, ctx: RoundContext
) -> tuple[list[PseudoLabelRecord], RoundManifest]:
    """Train on the previous round's dataset, detect on every frame, filter, persist."""
    if not prior:
        raise PipelineStateError(f"round {k - 1} produced an empty dataset; nothing to train on")
    ctx.source.fit(k, prior, prior_digest)
    detections = ctx.source.detect(ctx.frames)
    records, stats = filter_corpus(detections, plan.filter_cfg, ctx.registry, k, plan.jobs)
    digest = io.dataset_digest(records, ctx.registry, ctx.image_size)
    manifest = RoundManifest(
        round=k,
        tau=plan.filter_cfg.tau,
        overlap_metric=plan.filter_cfg.overlap_metric,
        frames_seen=stats.frames_seen,
        frames_accepted=stats.frames_accepted,
        per_class_counts=stats.per_class_counts(ctx.registry),
        input_digest=prior_digest,
        output_path=f"round_{k}",
        output_digest=digest,
        stage="filter",
        params=_params(plan, "filter"),
        stats=stats.rejection_dict(),
        metrics=ctx.source.quality(records, digest) if records else {},
    )
    return records, _persist(plan, ctx, k, records, manifest)


def load_round(
    plan: RoundPlan, ctx: RoundContext, k: int, expected_input: str
) -> tuple[list[PseudoLabelRecord], RoundManifest] | None:
    """Previously computed outputs of round ``k``, or None when it must be computed.

    Raises when the persisted state is corrupted or belongs to a different plan.
    """
    out = round_dir(plan, k)
    mpath = out / "manifest.json"
    if not mpath.exists():
        return None
    try:
        manifest = io.read_manifest(mpath)
    except ValidationError as exc:
        raise IntegrityError(f"{mpath}: {exc}") from exc
    stage = "bootstrap" if k == 0 else "filter"
    if manifest.input_digest != expected_input or manifest.params != _params(plan, stage):
        raise StalenessError(f"{mpath} was produced by a different plan or input; use a fresh workdir")
    try:
        on_disk = io.directory_digest(out)
        records = io.read_records(out / io.RECORDS_FILE)
    except (OSError, ValidationError) as exc:
        raise IntegrityError(f"{out}: cannot read round outputs ({exc})") from exc
    if on_disk != manifest.output_digest:
        raise IntegrityError(f"{out}: annotation files do not match the manifest digest")
    if io.dataset_digest(records, ctx.registry, ctx.image_size) != manifest.output_digest:
        raise IntegrityError(f"{out}: records.jsonl does not match the manifest digest")
    return records, manifest


ProgressFn = Callable[[int, str, RoundManifest], None]


def run_plan(plan: RoundPlan, progress: ProgressFn | None = None) -> list[RoundManifest]:
    """Run or resume bootstrap plus ``plan.rounds`` filtering rounds.

    Returns one manifest per round, round 0 first. ``progress`` is called with
    ``(k, "reused" | "computed", manifest)`` after each round.
    """
    workdir = Path(plan.workdir)
    try:
        workdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create workdir {workdir}: {exc}") from exc
    ctx = build_context(plan)
    (workdir / "plan.json").write_text(json.dumps(plan.to_json(), indent=2) + "\n", encoding="utf-8")

    manifests = []
    records: list[PseudoLabelRecord] = []
    expected_input = ctx.inventory_digest
    for k in range(plan.rounds + 1):
        loaded = load_round(plan, ctx, k, expected_input)
        if loaded is not None:
            records, manifest = loaded
            status = "reused"
        else:
            if k == 0:
                records, manifest = run_bootstrap_round(plan, ctx)
            else:
                records, manifest = run_round(k, records, expected_input, plan, ctx)
            status = "computed"
        log.info(
            "round %d %s: %d/%d frames accepted", k, status, manifest.frames_accepted, manifest.frames_seen
        )
        if progress is not None:
            progress(k, status, manifest)
        manifests.append(manifest)
        expected_input = manifest.output_digest
    return manifests
