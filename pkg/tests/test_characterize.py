import math
import random
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from dohmeter.characterize import (
    DOH,
    NON_DOH,
    ClassifierModel,
    InsufficientTail,
    RatioFeatures,
    RatioPoint,
    RegionClassifier,
    SingleClassInput,
    classify_flow,
    curve_summary,
    default_model,
    fit_region,
    header_overhead_report,
    points_matrix,
    ratio_points,
    read_points,
    write_points,
)
from dohmeter.flows import TCP, Flow, assemble_flows
from dohmeter.prober import ProbeReport
from dohmeter.testing import DohServerConfig
from dohmeter.testing.lab import Lab
from dohmeter.testing.synth import long_flow_trace, separable_clouds


def flow(packets, payload, group=None):
    return Flow(TCP, "10.0.0.1", 443, "10.0.0.2", 5000, 0, 1, packets, payload,
                packets // 2, payload // 2, packets - packets // 2, payload - payload // 2, group=group)


def labels_of(points):
    return np.array([p.label for p in points])


# ratio points

def test_point_is_exact_division():
    assert RatioPoint.of(flow(1000, 2000), "g") == RatioPoint(1000, 2.0, "g")
    assert RatioPoint.of(flow(3, 10)).avg_payload == 10 / 3


def test_ratio_points_follow_groups():
    flows = [flow(10, 100, "doh-a"), flow(20, 100), flow(5, 50, "web")]
    assert [p.group for p in ratio_points(flows)] == ["doh-a", "web"]
    assert [p.group for p in ratio_points(flows, include_ungrouped=True)] == ["doh-a", "", "web"]
    assert ratio_points(flows) == ratio_points(list(flows))


def test_point_validation():
    with pytest.raises(ValueError):
        RatioPoint(0, 1.0)
    with pytest.raises(ValueError):
        RatioPoint(1, -1.0)


def test_ratio_features_transformer():
    X = RatioFeatures().fit_transform(np.array([[1000, 2000], [4, 4800]]))
    assert X.tolist() == [[1000, 2.0], [4, 1200.0]]
    assert RatioFeatures().transform([flow(10, 55)]).tolist() == [[10, 5.5]]


def test_points_csv_roundtrip(tmp_path):
    points = [RatioPoint(12, 1 / 3, "doh"), RatioPoint(4, 1200.5, "web")]
    path = tmp_path / "points.csv"
    assert write_points(path, points) == 2
    assert path.read_text().splitlines()[0] == "group,packet_count,avg_payload"
    assert read_points(path) == points
    labeled = [RatioPoint(5, 10.0, "x", DOH)]
    write_points(path, labeled)
    assert read_points(path) == labeled


# curves

def long_points(asymptote, seed=0, group="g"):
    trace = long_flow_trace(random.Random(seed), asymptote, n_flows=40)
    return [RatioPoint.of(f, group) for f in assemble_flows(trace)]


@pytest.mark.parametrize("asymptote", [120, 300])
def test_tail_estimate_converges(asymptote):
    curve = curve_summary(long_points(asymptote))["g"]
    assert curve.tail_points >= 5
    assert abs(curve.tail_estimate - asymptote) <= 0.05 * asymptote
    counts = [p.packet_count for p in curve.points]
    assert counts == sorted(counts)
    assert all(p.packet_count < 1000 for p in curve.short_points)


def test_two_asymptotes_are_distinguishable():
    curves = curve_summary(long_points(120, 1, "a") + long_points(300, 2, "b"))
    assert curves["b"].tail_estimate - curves["a"].tail_estimate > 150


def test_short_flows_only_give_insufficient_tail():
    points = [RatioPoint(n, 100.0, "g") for n in range(10, 999, 50)]
    with pytest.warns(InsufficientTail):
        curve = curve_summary(points)["g"]
    assert curve.tail_estimate is None and len(curve.points) == len(points)


# region classifier

def test_documented_examples():
    model = ClassifierModel(400, 20)
    assert model.classify(500, 150)[0] == DOH
    assert model.classify(4, 1200)[0] == NON_DOH
    assert model.classify(20, 400) == (DOH, 0.5)


def test_degenerate_model_accepts_everything():
    model = ClassifierModel(math.inf, 1)
    for pk, avg in [(1, 1e9), (1, 0.0), (10**6, 1448.0)]:
        label, score = model.classify(pk, avg)
        assert label == DOH and score >= 0.5
    assert ClassifierModel.from_json(model.to_json()) == model
    assert model.to_json()["max_avg_payload"] is None


def test_model_invariants():
    with pytest.raises(ValueError):
        ClassifierModel(0, 1)
    with pytest.raises(ValueError):
        ClassifierModel(100, 0)


def test_separable_clouds_fit_perfectly():
    points = separable_clouds(random.Random(0), 200)
    model = fit_region(points)
    assert model.training_balanced_accuracy == 1.0
    assert all(model.classify(p.packet_count, p.avg_payload)[0] == p.label for p in points)


def test_identical_clouds_are_chance_level_on_held_out_data():
    rng = random.Random(1)
    train = separable_clouds(rng, 400, overlap=True)
    test = separable_clouds(rng, 400, overlap=True)
    clf = RegionClassifier().fit(points_matrix(train), labels_of(train))
    assert 0.4 <= clf.balanced_accuracy(points_matrix(test), labels_of(test)) <= 0.6


def test_single_class_input():
    with pytest.raises(SingleClassInput):
        fit_region([RatioPoint(10, 10.0, "doh")])
    with pytest.raises(SingleClassInput):
        RegionClassifier().fit([[1, 1], [2, 2]], [DOH, DOH])


def test_fit_is_deterministic():
    points = separable_clouds(random.Random(5), 300)
    assert fit_region(points) == fit_region(list(points))
    shuffled = list(points)
    random.Random(9).shuffle(shuffled)
    assert fit_region(shuffled) == fit_region(points)


def test_tie_break_centres_payload_threshold():
    X = [[50, 100.0], [60, 110.0], [5, 900.0], [6, 1000.0]]
    y = [DOH, DOH, NON_DOH, NON_DOH]
    clf = RegionClassifier().fit(X, y)
    assert clf.min_packet_count_ == 5
    assert clf.max_avg_payload_ == (110 + 900) / 2


def test_estimator_api():
    points = separable_clouds(random.Random(2), 100)
    X, y = points_matrix(points), labels_of(points)
    clf = clone(RegionClassifier(max_candidates=64))
    assert clf.get_params() == {"pos_label": DOH, "max_candidates": 64}
    clf.fit(X, y)
    assert clf.score(X, y) == 1.0
    assert set(clf.predict(X)) == {DOH, NON_DOH}
    assert np.all((clf.predict_score(X) >= 0.5) == (clf.predict(X) == DOH))
    raw = np.column_stack([X[:, 0], X[:, 0] * X[:, 1]])
    pipeline = make_pipeline(RatioFeatures(), RegionClassifier()).fit(raw, y)
    assert pipeline.score(raw, y) == 1.0


def test_boolean_labels():
    clf = RegionClassifier().fit([[50, 100], [5, 900]], [True, False])
    assert clf.predict([[80, 90]]).tolist() == [True]


def test_classify_flow_and_default_model():
    model = default_model()
    assert model.training_balanced_accuracy == 1.0
    assert classify_flow(flow(500, 500 * 60), model)[0] == DOH
    assert classify_flow(flow(4, 4 * 1200), model)[0] == NON_DOH


def test_model_file_roundtrip(tmp_path):
    model = ClassifierModel(210.5, 28, {"doh": 60.0}, 0.98)
    model.save(tmp_path / "m.json")
    assert ClassifierModel.load(tmp_path / "m.json") == model
    assert model.nearest_reference(70.0) == "doh"


pk = st.integers(1, 10**6)
avg = st.floats(0.0, 1e5, allow_nan=False)
models = st.builds(ClassifierModel, st.floats(1e-3, 1e5), st.integers(1, 10**4))


@settings(max_examples=300)
@given(models, pk, avg, avg)
def test_smaller_payload_never_leaves_region(model, n, a, b):
    lo, hi = sorted((a, b))
    label_hi, score_hi = model.classify(n, hi)
    label_lo, score_lo = model.classify(n, lo)
    if label_hi == DOH:
        assert label_lo == DOH
    assert score_lo >= score_hi


@settings(max_examples=300)
@given(models, pk, avg, st.floats(1.0, 100.0))
def test_scaling_payload_up_never_helps(model, n, a, k):
    assume(a * k < 1e300)
    before = model.classify(n, a)
    after = model.classify(n, a * k)
    assert after[1] <= before[1]
    if before[0] == NON_DOH:
        assert after[0] == NON_DOH


@settings(max_examples=300)
@given(models, pk, avg)
def test_score_agrees_with_label(model, n, a):
    label, score = model.classify(n, a)
    assert 0.0 <= score <= 1.0
    assert (score >= 0.5) == (label == DOH)


# header report

def probe_report(url, items, size, at=0):
    from datetime import datetime, timedelta, timezone

    return ProbeReport("p", url, datetime(2021, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=at), True,
                       methods={"get": True, "post": True, "json": False},
                       response_header_items=tuple(items), response_header_bytes=size)


def test_empty_header_report():
    report = header_overhead_report([])
    assert (report.servers, report.histogram, report.name_frequency, report.missing_required) == (0, {}, {}, {})
    assert report.share_below(200) == 0.0


def test_header_report_frequency_and_share():
    base = [("content-type", "application/dns-message"), ("content-length", "60")]
    reports = [probe_report(f"https://s{i}/q", base + ([("x-powered-by", "DNS over HTTPS")] if i < 3 else []),
                            120 + 40 * i) for i in range(8)]
    report = header_overhead_report(reports)
    assert report.name_frequency["x-powered-by"] == 3
    assert report.name_frequency["content-type"] == 8
    assert report.share_below(200) == 2 / 8
    assert report.share_below(300) == 5 / 8
    assert report.required_ok
    assert report.to_json()["histogram"][0] == {"bin_start": 100, "bin_end": 199, "count": 2}


def test_header_report_uses_latest_per_url():
    old = probe_report("https://s/q", [("content-type", "x")], 150, at=0)
    new = probe_report("https://s/q", [("content-type", "x"), ("content-length", "1")], 950, at=60)
    report = header_overhead_report([new, old])
    assert report.servers == 1 and report.histogram == {900: 1} and report.required_ok


# fixture traffic

@pytest.mark.lab
def test_h2_sessions_sit_below_h1_sessions():
    with Lab() as lab:
        h1 = ratio_points(lab.capture_sessions([50, 100, 200], http="h1").flows())
        h2 = ratio_points(lab.capture_sessions([50, 100, 200], http="h2").flows())
    assert len(h1) == len(h2) == 3
    for a, b in zip(sorted(h1, key=lambda p: p.packet_count), sorted(h2, key=lambda p: p.packet_count)):
        assert abs(a.packet_count - b.packet_count) <= 0.05 * a.packet_count
        assert b.avg_payload < a.avg_payload


@pytest.mark.lab
def test_header_bloat_separates_servers():
    bloated = DohServerConfig(alpn=("http/1.1",), extra_headers=tuple((f"x-h{i}", "v" * 40) for i in range(8)))
    lean = DohServerConfig(alpn=("http/1.1",))
    groups = {}
    for name, config in (("lean", lean), ("bloated", bloated)):
        with Lab(config) as lab:
            groups[name] = ratio_points(lab.capture_sessions([40, 80, 160], http="h1", label=name).flows())
    assert all(p.packet_count >= 100 for ps in groups.values() for p in ps)
    assert max(p.avg_payload for p in groups["lean"]) < min(p.avg_payload for p in groups["bloated"])
