import json
import random
import ssl
import threading
from datetime import datetime, timedelta, timezone

import pytest

from dohmeter.characterize import header_overhead_report
from dohmeter.prober import (
    EmptyIndex,
    ProbeOptions,
    ProbeReport,
    ProbeTarget,
    ServerIndex,
    aggregate_index,
    header_histogram,
    latest_view,
    load_targets,
    parse_interval,
    percent,
    probe_all,
    probe_target,
    probe_tls_versions,
    run_monitor,
)
from dohmeter.prober.probes import issuer_of
from dohmeter.testing import DohServerConfig
from dohmeter.testing.certs import make_cert_bundle
from dohmeter.testing.synth import TABLE1_PERCENTS, table1_reports
from probe_fixtures import DEPLOYMENTS, deployment_env, expected_capabilities, h1_block_size

pytestmark = pytest.mark.lab

T0 = datetime(2021, 3, 1, tzinfo=timezone.utc)


@pytest.fixture
def env():
    with deployment_env() as value:
        yield value


@pytest.mark.parametrize("name", sorted(DEPLOYMENTS))
def test_fixture_deployment_report_is_exact(env, name):
    zone, start = env
    config, http, tls = DEPLOYMENTS[name]
    server, target, options = start(config)
    report = probe_target(target, options)
    assert report.capabilities() == expected_capabilities(server, http, tls, zone)
    assert report.errors.keys() <= {"http.h1_1", "http.h2", "tls.v1_2", "tls.v1_3"}


def test_legacy_tls_and_lets_encrypt_issuer(env):
    zone, start = env
    config = DohServerConfig(min_tls=ssl.TLSVersion.TLSv1, max_tls=ssl.TLSVersion.TLSv1_1,
                             issuer_org="Let's Encrypt")
    server, target, options = start(config)
    without = probe_tls_versions(target, options)
    assert without == {"v1_0": None, "v1_1": None, "v1_2": False, "v1_3": False}
    legacy = ProbeOptions(timeout=3, cafile=server.ca_file, tls_legacy=True,
                          bootstrap_resolver=options.bootstrap_resolver)
    report = probe_target(target, legacy)
    assert report.tls == {"v1_0": True, "v1_1": True, "v1_2": False, "v1_3": False}
    assert report.lets_encrypt and "O=Let's Encrypt" in report.cert_issuer
    assert report.available


def test_issuer_match_is_case_insensitive():
    bundle = make_cert_bundle("LET'S ENCRYPT", ("localhost",))
    with open(bundle.cert_file, "rb") as f:
        pem = f.read()
    from cryptography import x509
    from cryptography.hazmat.primitives.serialization import Encoding

    der = x509.load_pem_x509_certificates(pem)[0].public_bytes(Encoding.DER)
    assert issuer_of(der)[1] is True


def test_content_type_violation_clears_flag_only(env):
    zone, start = env
    _, target, options = start(DohServerConfig(wire_content_type="application/octet-stream"))
    report = probe_target(target, options)
    assert report.methods["get"] and report.methods["post"]
    assert report.rfc8484_content_type_ok is False


def test_json_disabled(env):
    _, start = env
    _, target, options = start(DohServerConfig(allow_json=False, allow_post=False))
    report = probe_target(target, options)
    assert report.methods == {"get": True, "post": False, "json": False}
    assert report.available


def test_extra_header_is_inventoried(env):
    _, start = env
    _, target, options = start(DohServerConfig(alpn=("http/1.1",), extra_headers=(("X-Powered-By", "fixture/1.0"),)))
    report = probe_target(target, options)
    assert ("x-powered-by", "fixture/1.0") in report.response_header_items


def padded_config(zone, total=950):
    from probe_fixtures import expected_headers

    base = DohServerConfig(alpn=("http/1.1",), extra_headers=(("x-pad", ""),))
    size = h1_block_size("HTTP/1.1 200 OK", expected_headers(zone, base))
    return DohServerConfig(alpn=("http/1.1",), extra_headers=(("x-pad", "p" * (total - size)),))


def test_950_byte_header_block(env):
    zone, start = env
    config = padded_config(zone)
    _, target, options = start(config)
    report = probe_target(target, options)
    assert abs(report.response_header_bytes - 950) <= 2
    assert header_histogram([report.response_header_bytes]) == {900: 1}
    assert header_overhead_report([report]).required_ok


def test_missing_content_length_fails_required_check(env):
    _, start = env
    _, good_target, options = start(DohServerConfig(alpn=("http/1.1",)), provider="good")
    _, bad_target, _ = start(DohServerConfig(alpn=("http/1.1",), send_content_length=False), provider="bad")
    good = probe_target(good_target, options)
    bad = probe_target(bad_target, options)
    assert header_overhead_report([good]).required_ok
    summary = header_overhead_report([good, bad])
    assert not summary.required_ok
    assert summary.missing_required == {bad.url: ("content-length",)}


def test_unreachable_target_reports_nothing():
    target = ProbeTarget.from_url("gone", "https://127.0.0.1:1/dns-query")
    report = probe_target(target, ProbeOptions(timeout=1))
    assert not report.reachable and not report.available
    assert not any(report.http.values()) and not any(report.methods.values())
    assert not any(v for v in report.tls.values())
    assert report.response_header_items == () and report.response_header_bytes == 0


def test_probe_all_keeps_order(env):
    _, start = env
    targets = []
    for config in (DohServerConfig(alpn=("h2",)), DohServerConfig(alpn=("http/1.1",))):
        server, target, options = start(config)
        targets.append(target)
    # Both fixtures share one CA file path pattern; probe each with its own trust anchor.
    reports = probe_all(targets, ProbeOptions(timeout=3, verify=False,
                                              bootstrap_resolver=options.bootstrap_resolver), parallel=2)
    assert [r.url for r in reports] == [t.url for t in targets]
    assert [r.experimental for r in reports] == [False, True]


# targets file

def test_load_targets(tmp_path):
    path = tmp_path / "targets.csv"
    path.write_text("# list\nprovider,url,bootstrap_address\n"
                    "Cloudflare,https://cloudflare-dns.com/dns-query,1.1.1.1\n"
                    "Google,https://dns.google/dns-query,\n")
    targets = load_targets(path)
    assert [t.provider for t in targets] == ["Cloudflare", "Google"]
    assert targets[0].endpoint.dial_address == ("1.1.1.1", 443)
    assert targets[1].endpoint.bootstrap_address is None
    path.write_text("provider,url\nX,http://insecure/dns-query\n")
    with pytest.raises(ValueError):
        load_targets(path)


# index and aggregation

def report(url="https://a.example/dns-query", provider="a", at=T0, available=True, **kw):
    return ProbeReport(provider, url, at, available,
                       http={"h1_1": True, "h2": True},
                       tls={"v1_0": False, "v1_1": False, "v1_2": True, "v1_3": True},
                       ip={"v4": True, "v6": False},
                       methods={"get": available, "post": available, "json": False},
                       rfc8484_content_type_ok=available, **kw)


def test_report_json_roundtrip():
    r = report(response_header_items=(("content-type", "application/dns-message"),), response_header_bytes=120)
    assert ProbeReport.from_json(json.loads(r.to_jsonl())) == r


def test_table1_percentages_replay():
    agg = aggregate_index(table1_reports())
    assert agg.servers == 92
    assert tuple(str(row.percent) for row in agg.rows) == TABLE1_PERCENTS
    assert agg.render_table().splitlines()[1] == "HTTP2 88 95.7%"


def test_percent_rounds_half_up():
    assert str(percent(1, 8)) == "12.5"
    assert str(percent(1, 16)) == "6.3"
    assert str(percent(1, 1)) == "100.0"


def test_single_report_is_all_or_nothing():
    agg = aggregate_index([report()])
    assert agg.row("HTTP2").render() == "HTTP2 1 100.0%"
    assert agg.row("IPv6").render() == "IPv6 0 0.0%"
    assert agg.row("TLS1.3").percent == 100


def test_untestable_facets_leave_denominator():
    r1 = report(url="https://a/q")
    r2 = report(url="https://b/q")
    r2 = ProbeReport(**{**r2.__dict__, "ip": {"v4": True, "v6": None}})
    agg = aggregate_index([r1, r2])
    assert (agg.row("IPv6").count, agg.row("IPv6").total) == (0, 1)
    assert agg.row("IPv4").total == 2


def test_header_histogram_bins():
    assert header_histogram([150, 180, 950]) == {100: 2, 900: 1}
    assert header_histogram([99, 100], bin_width=50) == {50: 1, 100: 1}


def test_latest_view_and_inactive_flag():
    url = "https://flaky/q"
    reports = [report(url=url, at=T0), report(url=url, at=T0 + timedelta(hours=6), available=False),
               report(url=url, at=T0 + timedelta(hours=12), available=False)]
    (entry,) = latest_view(reports)
    assert entry.inactive and entry.consecutive_failures == 2 and entry.history == 3
    (entry,) = latest_view(reports, at=T0 + timedelta(hours=7))
    assert not entry.inactive and entry.consecutive_failures == 1
    agg = aggregate_index(reports)
    assert agg.inactive == 1 and agg.servers == 0 and agg.inactive_urls == (url,)


def test_empty_index_raises(tmp_path):
    with pytest.raises(EmptyIndex):
        aggregate_index(ServerIndex(tmp_path / "none.jsonl"))
    with pytest.raises(EmptyIndex):
        aggregate_index([report()], at=T0 - timedelta(days=1))


def test_index_survives_torn_line(tmp_path):
    index = ServerIndex(tmp_path / "index.jsonl")
    index.append(report(url="https://a/q"))
    with open(index.path, "a") as f:
        f.write('{"schema": "dohmeter.probe/1", "provider": "tor')
    index.append(report(url="https://b/q"))
    reports = index.reports()
    assert [r.url for r in reports] == ["https://a/q", "https://b/q"]
    assert index.torn_lines == 1


def test_concurrent_appends_keep_whole_lines(tmp_path):
    index = ServerIndex(tmp_path / "index.jsonl")

    def writer(n):
        for i in range(25):
            ServerIndex(index.path).append(report(url=f"https://w{n}/{i}"))

    threads = [threading.Thread(target=writer, args=(n,)) for n in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(index.reports()) == 100 and index.torn_lines == 0


def test_aggregate_is_deterministic(tmp_path):
    reports = table1_reports()
    shuffled = list(reports)
    random.Random(3).shuffle(shuffled)
    assert aggregate_index(reports).to_json() == aggregate_index(shuffled).to_json()


# monitoring

def test_monitor_cycles_and_sleep(tmp_path):
    index = ServerIndex(tmp_path / "index.jsonl")
    targets = [ProbeTarget.from_url(p, f"https://{p}.example/dns-query") for p in ("a", "b")]
    sleeps = []
    clock = [T0]

    def fake_probe(target, options):
        clock[0] += timedelta(seconds=1)
        return report(url=target.url, provider=target.provider, at=clock[0])

    result = run_monitor(targets, index, 6 * 3600, cycles=3, sleep=sleeps.append, probe=fake_probe)
    assert (result.cycles, result.reports) == (3, 6)
    assert sleeps == [21600, 21600]
    assert len(index.reports()) == 6
    assert [e.history for e in index.latest()] == [3, 3]


def test_monitor_flags_failing_target_without_deleting(tmp_path):
    index = ServerIndex(tmp_path / "index.jsonl")
    targets = [ProbeTarget.from_url("a", "https://a.example/q"), ProbeTarget.from_url("b", "https://b.example/q")]
    cycle = {"n": 0}

    def fake_probe(target, options):
        cycle["n"] += 1
        ok = target.provider == "a" or cycle["n"] <= 2
        return report(url=target.url, provider=target.provider, at=T0 + timedelta(minutes=cycle["n"]), available=ok)

    run_monitor(targets, index, 60, cycles=3, sleep=lambda s: None, probe=fake_probe, parallel=1)
    entries = {e.report.url: e for e in index.latest()}
    assert not entries["https://a.example/q"].inactive
    assert entries["https://b.example/q"].inactive
    assert entries["https://b.example/q"].history == 3


def test_monitor_stop_condition_and_validation(tmp_path):
    index = ServerIndex(tmp_path / "i.jsonl")
    calls = iter([False, True])
    result = run_monitor([], index, 60, stop=lambda: next(calls), sleep=lambda s: None)
    assert result.cycles == 1
    with pytest.raises(ValueError):
        run_monitor([], index, 30, cycles=1)
    with pytest.raises(ValueError):
        run_monitor([], index, 60)


def test_parse_interval():
    assert parse_interval("6h") == 21600
    assert parse_interval("90") == 90
    assert parse_interval("1d") == 86400
    with pytest.raises(ValueError):
        parse_interval("soon")
