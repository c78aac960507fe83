"""Command-line entry point.

Human-readable progress goes to stderr, machine-readable output to stdout.
Exit codes: 0 success, 2 input/validation error, 3 pipeline-state error,
4 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import io
from ._parallel import default_jobs
from .bootstrap import ANCHOR_RULES, BootstrapConfig, bootstrap_corpus
from .errors import PipelineStateError, TrainingError, ValidationError
from .eval import evaluate_map, label_quality
from .filter import MATCH_MODES, FilterConfig, filter_corpus
from .geometry import Box2D
from .model import Provenance, PseudoLabelRecord
from .rounds import FileInputs, RoundPlan, SimPlan, run_plan
from .sim import DetectorNoise, SceneSpec, build_corpus, gt_to_json

log = logging.getLogger("wsloc")

EXIT_OK, EXIT_INPUT, EXIT_STATE, EXIT_INTERNAL = 0, 2, 3, 4


def _image_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _tools_per_frame(text: str) -> tuple[tuple[int, float], ...]:
    """``3`` or ``1:0.2,2:0.3,3:0.5``."""
    try:
        if ":" not in text:
            return ((int(text), 1.0),)
        return tuple((int(n), float(p)) for n, p in (item.split(":") for item in text.split(",")))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tools-per-frame spec {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workdir", default=".")
    g.add_argument("--jobs", type=_positive_int, default=default_jobs())
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g.add_argument("--json", action="store_true", help="print a machine-readable summary on stdout")
    return p


def _bootstrap_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-part-confidence", type=float, default=None)
    p.add_argument("--anchor-rule", choices=ANCHOR_RULES, default=None)
    p.add_argument("--required-tool-count", type=int, default=None)


def _filter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--overlap-metric", choices=["iou", "iomin"], default=None)
    p.add_argument("--match-mode", choices=MATCH_MODES, default=None)
    p.add_argument("--min-tool-confidence", type=float, default=None)


def _scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=_positive_int, default=None)
    p.add_argument("--image-size", type=_image_size, default=None)
    p.add_argument("--tools-per-frame", type=_tools_per_frame, default=None)
    p.add_argument("--crossing-prob", type=float, default=None)
    p.add_argument("--special-fraction", type=float, default=None)
    p.add_argument("--frames-per-clip", type=_positive_int, default=None)
    p.add_argument("--jitter-sigma", type=float, default=None)
    p.add_argument("--miss-rate", type=float, default=None)
    p.add_argument("--fp-rate", type=float, default=None)


def _given(args, mapping: dict[str, str]) -> dict:
    return {field: getattr(args, attr) for attr, field in mapping.items() if getattr(args, attr) is not None}


def _bootstrap_cfg(args, base: BootstrapConfig | None = None) -> BootstrapConfig:
    base = base or BootstrapConfig()
    return dataclasses.replace(
        base,
        **_given(args, {
            "min_part_confidence": "min_part_confidence",
            "anchor_rule": "anchor_rule",
            "required_tool_count": "required_tool_count",
        }),
    )


def _filter_cfg(args, base: FilterConfig | None = None) -> FilterConfig:
    base = base or FilterConfig()
    return dataclasses.replace(
        base,
        **_given(args, {
            "tau": "tau",
            "overlap_metric": "overlap_metric",
            "match_mode": "match_mode",
            "min_tool_confidence": "min_tool_confidence",
        }),
    )


def _scene(args, base: SceneSpec | None = None) -> SceneSpec:
    base = base or SceneSpec()
    return dataclasses.replace(
        base,
        seed=args.seed,
        **_given(args, {
            "image_size": "image_size",
            "tools_per_frame": "tools_per_frame",
            "crossing_prob": "crossing_prob",
            "special_fraction": "special_fraction",
            "frames_per_clip": "frames_per_clip",
        }),
    )


def _noise(args, base: DetectorNoise | None = None) -> DetectorNoise:
    base = base or DetectorNoise()
    return dataclasses.replace(
        base,
        **_given(args, {"jitter_sigma": "box_jitter_sigma", "miss_rate": "miss_rate", "fp_rate": "false_positive_rate"}),
    )


def _write_effective(directory: Path, command: str, config: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"effective_config.{command}.json"
    path.write_text(json.dumps({"command": command, **config}, indent=2, default=str) + "\n", encoding="utf-8")


def _emit(args, payload) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, default=str) + "\n")


def _globals(args) -> dict:
    return {"seed": args.seed, "workdir": args.workdir, "jobs": args.jobs, "log_level": args.log_level}


# ----------------------------------------------------------------- commands


def cmd_bootstrap(args) -> int:
    cfg = _bootstrap_cfg(args)
    filter_cfg = FilterConfig()
    out = Path(args.out)
    _write_effective(out, "bootstrap", {
        **_globals(args),
        "detections": args.detections, "captions": args.captions, "classes": args.classes,
        "image_size": list(args.image_size), "bootstrap": dataclasses.asdict(cfg),
    })
    registry = io.read_classes(args.classes)
    captions = io.read_captions(args.captions, registry)
    frames = list(io.read_detections(args.detections))
    records, stats = bootstrap_corpus(frames, captions, cfg, args.jobs)
    summary = io.write_pseudo_dataset(records, args.image_size, out, registry)
    per_class = {n: 0 for n in registry.names}
    for r in records:
        for e in r.entries:
            per_class[e.label] += 1
    manifest = io.write_manifest(
        io.RoundManifest(
            round=0, tau=filter_cfg.tau, overlap_metric=filter_cfg.overlap_metric,
            frames_seen=stats.frames_seen, frames_accepted=stats.frames_labeled,
            per_class_counts=per_class,
            input_digest=io.digest_json([io.frame_to_json(f, False) for f in frames]),
            output_path=".", output_digest=io.dataset_digest(records, registry, args.image_size),
            stage="bootstrap", params=dict(cfg.params()),
            stats={k: v for k, v in stats.as_dict().items() if k not in ("frames_seen", "frames_labeled")},
        ),
        out / "manifest.json",
    )
    for key, value in stats.as_dict().items():
        log.info("%s: %d", key, value)
    _emit(args, {"stats": stats.as_dict(), "summary": summary, "manifest": manifest.to_json()})
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _filter_cfg(args)
    out = Path(args.out)
    _write_effective(out, "filter", {
        **_globals(args), "detections": args.detections, "classes": args.classes,
        "image_size": list(args.image_size), "round": args.round, "filter": dataclasses.asdict(cfg),
    })
    registry = io.read_classes(args.classes)
    frames = list(io.read_detections(args.detections))
    records, stats = filter_corpus(frames, cfg, registry, args.round, args.jobs)
    summary = io.write_pseudo_dataset(records, args.image_size, out, registry)
    manifest = io.write_manifest(
        io.RoundManifest(
            round=args.round, tau=cfg.tau, overlap_metric=cfg.overlap_metric,
            frames_seen=stats.frames_seen, frames_accepted=stats.frames_accepted,
            per_class_counts=stats.per_class_counts(registry),
            input_digest=io.digest_json([io.frame_to_json(f) for f in frames]),
            output_path=".", output_digest=io.dataset_digest(records, registry, args.image_size),
            stage="filter", params=dict(cfg.params()), stats=stats.rejection_dict(),
        ),
        out / "manifest.json",
    )
    log.info("accepted %d of %d frames", stats.frames_accepted, stats.frames_seen)
    for key, value in stats.rejection_dict().items():
        log.info("%s: %d", key, value)
    _emit(args, {"summary": summary, "manifest": manifest.to_json()})
    return EXIT_OK


def _plan_from_args(args) -> RoundPlan:
    if args.plan:
        try:
            obj = json.loads(Path(args.plan).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"file not found: {args.plan}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.plan}: invalid JSON ({exc.msg})") from None
        if args.rounds is not None:
            obj["rounds"] = args.rounds
        base = RoundPlan.from_json(obj, seed=args.seed, workdir=args.workdir, jobs=args.jobs)
    else:
        base = RoundPlan(rounds=args.rounds or 4, workdir=args.workdir, seed=args.seed, jobs=args.jobs)
    detector = args.detector or base.detector
    inputs = base.inputs
    if args.detections or args.captions or args.classes:
        if not (args.detections and args.captions and args.classes):
            raise ValidationError("--detections, --captions and --classes must be given together")
        inputs = FileInputs(args.detections, args.captions, args.classes, args.image_size or (1280, 720))
    sim = SimPlan(
        args.frames if args.frames is not None else base.sim.frames,
        _scene(args, base.sim.scene),
        _noise(args, base.sim.noise),
    )
    return dataclasses.replace(
        base,
        rounds=args.rounds if args.rounds is not None else base.rounds,
        detector=detector,
        filter_cfg=_filter_cfg(args, base.filter_cfg),
        bootstrap_cfg=_bootstrap_cfg(args, base.bootstrap_cfg),
        sim=sim,
        inputs=inputs,
    )


def cmd_round(args) -> int:
    plan = _plan_from_args(args)
    workdir = Path(plan.workdir)
    _write_effective(workdir, "round", {**_globals(args), "plan": plan.to_json()})
    statuses = {}

    def progress(k, status, manifest):
        statuses[k] = status
        m = manifest.metrics
        extra = ""
        if m.get("label_precision") is not None:
            extra = f" precision={m['label_precision']:.4f} map={m['detector_map']:.4f}"
        print(
            f"round {k}: {status} accepted={manifest.frames_accepted}/{manifest.frames_seen}{extra}",
            file=sys.stderr,
        )

    manifests = run_plan(plan, progress)
    _emit(args, {
        "manifests": [m.to_json() for m in manifests],
        "reused": [k for k, s in sorted(statuses.items()) if s == "reused"],
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    scene = _scene(args)
    noise = _noise(args)
    n_frames = args.frames or 1000
    out = Path(args.out)
    _write_effective(out, "simulate", {
        **_globals(args), "frames": n_frames,
        "scene": dataclasses.asdict(scene), "noise": dataclasses.asdict(noise),
    })
    corpus = build_corpus(scene, n_frames, noise)
    io.write_classes(corpus.registry, out / "classes.txt")
    io.write_detections(corpus.detections, out / "detections.jsonl", include_tools=False)
    io.write_captions(corpus.captions.values(), out / "captions.csv")
    io.write_jsonl((gt_to_json(g) for g in corpus.truth), out / "gt.jsonl")
    crossed = sum(g.crossed for g in corpus.truth)
    log.info("wrote %d frames in %d clips (%d crossed) to %s", n_frames, len(corpus.captions), crossed, out)
    _emit(args, {"frames": n_frames, "clips": len(corpus.captions), "crossed": crossed, "out": str(out)})
    return EXIT_OK


def _load_boxes(path: str) -> dict[tuple[str, int], list[Box2D]]:
    """Boxes per frame from detections (``tools``), ground truth (``instruments``) or records (``entries``)."""
    out: dict[tuple[str, int], list[Box2D]] = {}
    for lineno, obj in io.read_jsonl(path):
        if not isinstance(obj, dict) or "clip_id" not in obj or "frame" not in obj:
            raise ValidationError(f"{path}: line {lineno}: missing clip_id/frame")
        key = (obj["clip_id"], int(obj["frame"]))
        items = obj.get("tools") or obj.get("instruments") or obj.get("entries") or []
        boxes = []
        for i, item in enumerate(items):
            boxes.append(io.parse_box(item.get("box"), item.get("conf"), item.get("class"), lineno, f"[{i}]"))
        out.setdefault(key, []).extend(boxes)
    return out


def cmd_eval(args) -> int:
    _write_effective(Path(args.workdir), "eval", {**_globals(args), "pred": args.pred, "gt": args.gt, "iou_thresh": args.iou_thresh})
    preds = _load_boxes(args.pred)
    gts = _load_boxes(args.gt)
    report = evaluate_map(preds, gts)
    records = [
        PseudoLabelRecord(k[0], k[1], tuple(v), Provenance(-1, "eval")) for k, v in sorted(preds.items()) if v
    ]
    q = label_quality(records, gts, args.iou_thresh)
    total_gt = sum(len(v) for v in gts.values())
    metrics = {
        **report.as_dict(),
        "precision": q.precision,
        "recall": q.correct / total_gt if total_gt else 0.0,
    }
    sys.stdout.write(json.dumps(metrics, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="wsloc", description="Weakly supervised instrument localization pseudo-labels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bootstrap", parents=[common], help="round-0 pseudo-labels from part detections and captions")
    p.add_argument("--detections", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=_image_size, default=(1280, 720))
    _bootstrap_flags(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("filter", parents=[common], help="single filtering pass over a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=_image_size, default=(1280, 720))
    p.add_argument("--round", type=int, default=1)
    _filter_flags(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("round", parents=[common], help="run or resume a multi-round plan")
    p.add_argument("--plan")
    p.add_argument("--rounds", type=_positive_int)
    p.add_argument("--detector", choices=["surrogate", "file"])
    p.add_argument("--detections")
    p.add_argument("--captions")
    p.add_argument("--classes")
    _scene_flags(p)
    _bootstrap_flags(p)
    _filter_flags(p)
    p.set_defaults(func=cmd_round)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    _scene_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", parents=[common], help="mAP and label quality of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except PipelineStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (ValidationError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
