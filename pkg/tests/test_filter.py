import random

import pytest
from hypothesis import given, settings, strategies as st

from wsloc.bootstrap import BootstrapConfig, bootstrap_corpus
from wsloc.errors import RegistryError, ValidationError
from wsloc.eval import label_quality
from wsloc.filter import FilterConfig, filter_corpus, filter_frame, filter_frame_result, match_count
from wsloc.model import FrameDetections, Provenance, PseudoLabelRecord
from wsloc.sim import SceneSpec, build_corpus, surrogate_detections, surrogate_train

from .helpers import as_plain, frame, part, random_filter_frame, tool
from .oracles import label_filter_literal

CFG = FilterConfig()


def test_nonspecial_tool_with_matching_clevis():
    t = tool(0, 0, 10, 10, "needle driver")
    assert match_count(t, [part(0, 0, 10, 9, "clevis")], CFG) == 1  # IOU 0.9


def test_special_tool_ignores_clevis():
    t = tool(0, 0, 10, 10, "stapler")
    assert match_count(t, [part(0, 0, 10, 9, "clevis"), part(0, 0, 10, 10, "shaft")], CFG) == 0
    assert match_count(t, [part(0, 0, 10, 9, "tip")], CFG) == 1


def test_threshold_is_strict():
    t = tool(0, 0, 10, 10, "needle driver")
    assert match_count(t, [part(0, 0, 10, 8, "clevis")], CFG) == 0  # IOU exactly 0.8
    assert match_count(t, [part(0, 0, 10, 8.01, "clevis")], CFG) == 1


def test_iomin_metric_accepts_contained_part():
    t = tool(0, 0, 100, 100, "needle driver")
    small = part(10, 10, 30, 30, "clevis")
    assert match_count(t, [small], CFG) == 0
    assert match_count(t, [small], FilterConfig(overlap_metric="iomin")) == 1


def test_two_tools_both_matched_accepted(registry):
    f = frame(
        [part(0, 0, 10, 9, "clevis"), part(50, 0, 60, 9, "tip")],
        [tool(0, 0, 10, 10, "needle driver"), tool(50, 0, 60, 10, "stapler")],
    )
    rec = filter_frame(f, CFG, registry)
    assert rec is not None and len(rec.entries) == 2
    assert [e.label for e in rec.entries] == ["needle driver", "stapler"]


def test_two_tools_one_matched_rejected(registry):
    f = frame(
        [part(0, 0, 10, 9, "clevis")],
        [tool(0, 0, 10, 10, "needle driver"), tool(50, 0, 60, 10, "stapler")],
    )
    res = filter_frame_result(f, CFG, registry)
    assert res.record is None and res.reason == "count_mismatch" and res.select_cnt == 1


def test_literal_and_capped_diverge_on_double_overlap(registry):
    f = frame(
        [part(0, 0, 100, 95, "tip"), part(0, 0, 100, 92, "tip")],
        [tool(0, 0, 100, 100, "suction irrigator")],
    )
    literal = filter_frame_result(f, FilterConfig(match_mode="literal"), registry)
    assert literal.record is None and literal.select_cnt == 2
    assert filter_frame(f, FilterConfig(match_mode="capped"), registry) is not None


def test_unregistered_tool_class(registry):
    f = frame([part(0, 0, 10, 9, "clevis")], [tool(0, 0, 10, 10, "laser lance")])
    with pytest.raises(RegistryError):
        filter_frame(f, CFG, registry)


def test_no_tools_never_accepted(registry):
    res = filter_frame_result(frame([part(0, 0, 10, 9, "clevis")]), CFG, registry)
    assert res.record is None and res.reason == "no_tools"


def test_low_confidence_tools_dropped_first(registry):
    f = frame(
        [part(0, 0, 10, 9, "clevis")],
        [tool(0, 0, 10, 10, "needle driver"), tool(50, 0, 60, 10, "stapler", conf=0.1)],
    )
    rec = filter_frame(f, CFG, registry)
    assert [e.label for e in rec.entries] == ["needle driver"]
    only_low = frame([part(0, 0, 10, 9, "clevis")], [tool(0, 0, 10, 10, "needle driver", conf=0.1)])
    assert filter_frame_result(only_low, CFG, registry).reason == "low_confidence_empty"


@pytest.mark.parametrize(
    "kwargs", [{"tau": 0.0}, {"tau": 1.0}, {"overlap_metric": "giou"}, {"match_mode": "soft"}, {"min_tool_confidence": 2}]
)
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        FilterConfig(**kwargs)


def _matching_frames(n):
    return [
        frame([part(0, 0, 10, 9, "clevis")], [tool(0, 0, 10, 10, "needle driver")], index=i) for i in range(n)
    ]


def test_corpus_saturation(registry):
    records, stats = filter_corpus(_matching_frames(7), CFG, registry)
    assert stats.frames_accepted == stats.frames_seen == 7
    assert stats.per_class_counts(registry)["needle driver"] == 7


def test_empty_corpus(registry):
    records, stats = filter_corpus([], CFG, registry)
    assert records == [] and stats.frames_seen == 0 and stats.frames_accepted == 0
    assert stats.rejection_dict() == {"count_mismatch": 0, "no_tools": 0, "low_confidence_empty": 0}


def test_stats_merge_is_associative(registry):
    frames = [random_filter_frame(random.Random(i), i) for i in range(30)]
    _, a = filter_corpus(frames[:10], CFG, registry)
    _, b = filter_corpus(frames[10:20], CFG, registry)
    _, c = filter_corpus(frames[20:], CFG, registry)
    _, whole = filter_corpus(frames, CFG, registry)
    for merged in (a.merge(b).merge(c), a.merge(b.merge(c))):
        assert merged.frames_seen == whole.frames_seen
        assert merged.frames_accepted == whole.frames_accepted
        assert merged.rejection_dict() == whole.rejection_dict()
        assert merged.per_class_counts(registry) == whole.per_class_counts(registry)


@pytest.fixture(scope="module")
def sim_round():
    corpus = build_corpus(SceneSpec(seed=21), 400)
    records, _ = bootstrap_corpus(corpus.detections, corpus.captions, BootstrapConfig())
    det = surrogate_train(records, corpus.gt_index, corpus.registry, seed=21)
    parts = {d.key: d for d in corpus.detections}
    return corpus, surrogate_detections(det, corpus.truth, parts)


def test_simulated_corpus_matches_oracle_frame_for_frame(sim_round):
    corpus, frames = sim_round
    cfg = FilterConfig(match_mode="literal", min_tool_confidence=0.0)
    accepted = {r.key for r in filter_corpus(frames, cfg, corpus.registry)[0]}
    expected = {f.key for f in frames if f.tools and label_filter_literal(*as_plain(f), 0.8)}
    assert accepted == expected
    assert 0 < len(accepted) < len(frames)


def test_parallel_matches_serial(sim_round):
    corpus, frames = sim_round
    frames = frames * 1  # 400 frames is above the pool threshold
    serial = filter_corpus(frames, CFG, corpus.registry, jobs=1)
    parallel = filter_corpus(frames, CFG, corpus.registry, jobs=3)
    assert serial[0] == parallel[0]
    assert serial[1] == parallel[1]


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_oracle_agreement_literal(seed, registry):
    f = random_filter_frame(random.Random(seed))
    cfg = FilterConfig(match_mode="literal", min_tool_confidence=0.0)
    assert (filter_frame(f, cfg, registry) is not None) == label_filter_literal(*as_plain(f), 0.8)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_permutation_invariance(seed, registry):
    rng = random.Random(seed)
    f = random_filter_frame(rng)
    tools, parts = list(f.tools), list(f.parts)
    rng.shuffle(tools)
    rng.shuffle(parts)
    g = FrameDetections(f.clip_id, f.frame_index, parts, tools)
    for mode in ("capped", "literal"):
        cfg = FilterConfig(match_mode=mode)
        assert (filter_frame(f, cfg, registry) is None) == (filter_frame(g, cfg, registry) is None)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_modes_agree_without_double_overlaps(seed, registry):
    f = random_filter_frame(random.Random(seed))
    literal_cfg = FilterConfig(match_mode="literal")
    tools = [t for t in f.tools if t.confidence >= literal_cfg.min_tool_confidence]
    if any(match_count(t, f.parts, literal_cfg, registry) > 1 for t in tools):
        return
    capped = filter_frame(f, FilterConfig(), registry)
    literal = filter_frame(f, literal_cfg, registry)
    assert (capped is None) == (literal is None)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**9), tau=st.floats(0.05, 0.9), step=st.floats(0.01, 0.09))
def test_tau_monotonic_per_frame(seed, tau, step, registry):
    f = random_filter_frame(random.Random(seed))
    low = filter_frame(f, FilterConfig(tau=tau), registry)
    high = filter_frame(f, FilterConfig(tau=tau + step), registry)
    assert high is None or low is not None


def _all_predictions_as_records(frames):
    return [
        PseudoLabelRecord(f.clip_id, f.frame_index, tuple(f.tools), Provenance(1, "raw")) for f in frames if f.tools
    ]


@pytest.mark.parametrize("crossing", [0.0, 0.1, 0.3])
def test_filter_never_concentrates_errors(crossing):
    corpus = build_corpus(SceneSpec(seed=4, crossing_prob=crossing), 1500)
    records, _ = bootstrap_corpus(corpus.detections, corpus.captions, BootstrapConfig())
    det = surrogate_train(records, corpus.gt_index, corpus.registry, seed=4)
    frames = surrogate_detections(det, corpus.truth, {d.key: d for d in corpus.detections})
    accepted, _ = filter_corpus(frames, CFG, corpus.registry)
    gt = corpus.gt_boxes()
    before = label_quality(_all_predictions_as_records(frames), gt).precision
    after = label_quality(accepted, gt).precision
    assert after >= before
