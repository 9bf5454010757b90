import csv
import io
import json
import subprocess
import sys

import pytest

from dohmeter.cli import main
from dohmeter.flows import read_capture, read_flows, write_pcap
from dohmeter.prober import ServerIndex
from dohmeter.testing.lab import domain_list
from dohmeter.testing.synth import long_flow_trace, table1_reports
from probe_fixtures import DEPLOYMENTS, deployment_env


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# configuration errors exit with 2

@pytest.mark.parametrize("argv", [
    ["query", "example.com", "--method", "udp", "--url", "https://doh.example/dns-query"],
    ["query", "example.com", "--method", "udp"],
    ["query", "example.com", "--method", "get"],
    ["query", "example.com", "--method", "smoke-signals", "--server", "127.0.0.1"],
    ["query", "--method", "tcp", "--server", "127.0.0.1"],
    ["query", "example.com", "--method", "get", "--url", "http://plain.example/dns-query"],
    ["query", "example.com", "--method", "json", "--url", "https://d.example/q", "--padding", "128"],
    ["query", "example.com", "--method", "udp", "--server", "dns.example"],
    ["probe", "--targets", "/nonexistent/targets.csv", "--out", "/tmp/x.jsonl"],
    ["stats", "--index", "/nonexistent/index.jsonl"],
    ["monitor", "--targets", "{targets}", "--out", "{tmp}/i.jsonl", "--interval", "10s", "--cycles", "1"],
    ["analyze", "--pcap", "/nonexistent.pcap"],
    ["fit", "--points", "/nonexistent.csv", "--out", "/tmp/m.json"],
    ["classify", "--flows", "/nonexistent.jsonl"],
    ["report"],
])
def test_config_errors_exit_2(capsys, tmp_path, argv):
    targets = tmp_path / "targets.csv"
    targets.write_text("provider,url\nx,https://127.0.0.1:1/dns-query\n")
    argv = [a.format(targets=targets, tmp=tmp_path) for a in argv]
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert err.startswith("dohmeter: error:")


def test_parallel_must_be_positive(capsys):
    with pytest.raises(SystemExit) as info:
        main(["query", "x", "--server", "127.0.0.1", "--method", "udp", "--parallel", "0"])
    assert info.value.code == 2


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "dohmeter", "--version"], capture_output=True, text=True)
    assert result.returncode == 0 and result.stdout.startswith("dohmeter ")


# query

@pytest.mark.lab
def test_post_batch_of_100_domains(capsys, tmp_path, doh_server):
    domains = tmp_path / "domains.txt"
    domains.write_text("# top sites\n" + "\n".join(domain_list(100)) + "\n\n")
    out_file = tmp_path / "out.jsonl"
    code, out, err = run(capsys, "query", "--domains", domains, "--method", "post", "--url", doh_server.url,
                         "--bootstrap", doh_server.host, "--cafile", doh_server.ca_file, "--parallel", "8",
                         "--out", out_file)
    assert code == 0
    rows = jsonl(out_file.read_text())
    assert len(rows) == 100
    assert all(r["schema"] == "dohmeter.outcome/1" and r["rcode"] == 0 and r["method"] == "post" for r in rows)
    assert json.loads(err.strip().splitlines()[-1]) == {
        "schema": "dohmeter.batch-summary/1", "total": 100, "succeeded": 100, "failed": 0}


@pytest.mark.lab
def test_udp_query_with_capture(capsys, tmp_path, dns_server):
    host, port = dns_server.address
    pcap = tmp_path / "q.pcap"
    code, out, _ = run(capsys, "query", "example.com", "python.org", "--method", "udp",
                       "--server", f"{host}:{port}", "--capture", pcap, "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["qname"] for r in rows] == ["example.com.", "python.org."]
    packets = list(read_capture(pcap))
    assert len(packets) == 4 and all(p.protocol == "UDP" for p in packets)


@pytest.mark.lab
def test_failed_queries_are_reported_not_fatal(capsys, doh_server):
    code, out, err = run(capsys, "query", "example.com", "--method", "get", "--url", doh_server.url,
                         "--bootstrap", doh_server.host, "--timeout", "2")
    assert code == 0
    (row,) = jsonl(out)
    assert row["rcode"] is None and "TlsError" in row["error"]


# probe, monitor, stats, report

@pytest.mark.lab
def test_probe_then_stats(capsys, tmp_path):
    with deployment_env() as (zone, start):
        lines = ["provider,url,bootstrap_address"]
        resolver = None
        for name in ("h2-only", "h1.1-only"):
            server, target, options = start(DEPLOYMENTS[name][0], provider=name)
            lines.append(f"{name},{server.url},{server.host}")
            resolver = options.bootstrap_resolver
        targets = tmp_path / "targets.csv"
        targets.write_text("\n".join(lines) + "\n")
        index = tmp_path / "index.jsonl"
        code, _, err = run(capsys, "probe", "--targets", targets, "--out", index, "--insecure",
                           "--bootstrap-resolver", f"{resolver[0]}:{resolver[1]}", "--parallel", "2")
    assert code == 0
    assert len(ServerIndex(index).reports()) == 2
    code, out, _ = run(capsys, "stats", "--index", index)
    stats = json.loads(out)
    assert stats["servers"] == 2
    row = {r["label"]: r for r in stats["rows"]}["HTTP2"]
    assert (row["count"], row["total"], row["percent"]) == (1, 2, 50.0)
    code, out, _ = run(capsys, "stats", "--index", index, "--format", "csv")
    table = list(csv.DictReader(io.StringIO(out)))
    assert {"label": "HTTP/1.1 only (experimental)", "count": "1", "total": "2", "percent": "50.0"} in table


def test_unreachable_targets_still_exit_0(capsys, tmp_path):
    targets = tmp_path / "targets.csv"
    targets.write_text("provider,url\ngone,https://127.0.0.1:1/dns-query\n")
    code, _, _ = run(capsys, "probe", "--targets", targets, "--out", tmp_path / "i.jsonl", "--timeout", "1")
    assert code == 0


def test_stats_on_empty_index(capsys, tmp_path):
    index = tmp_path / "empty.jsonl"
    index.write_text("")
    code, out, _ = run(capsys, "stats", "--index", index)
    assert code == 0
    assert json.loads(out) == {"schema": "dohmeter.stats/1", "servers": 0, "note": "no data"}


def test_report_renders_table1_row(capsys, tmp_path):
    index = ServerIndex(tmp_path / "index.jsonl")
    index.extend(table1_reports())
    code, out, _ = run(capsys, "report", "--index", index.path, "--json", tmp_path / "r.json")
    assert code == 0
    assert "HTTP2 88 95.7%" in out.splitlines()
    assert "Let's Encrypt 54 58.7%" in out.splitlines()
    assert json.loads((tmp_path / "r.json").read_text())


def test_report_on_empty_index(capsys, tmp_path):
    (tmp_path / "i.jsonl").write_text("")
    code, out, _ = run(capsys, "report", "--index", tmp_path / "i.jsonl")
    assert code == 0 and "servers: no data" in out


def test_monitor_rejects_short_interval(capsys, tmp_path):
    targets = tmp_path / "t.csv"
    targets.write_text("provider,url\na,https://a.example/q\n")
    code, _, err = run(capsys, "monitor", "--targets", targets, "--out", tmp_path / "i.jsonl",
                       "--interval", "59s", "--cycles", "2")
    assert code == 2 and "at least 60" in err


# analyze, characterize, fit, classify

def test_pcap_to_classification_pipeline(capsys, tmp_path):
    import random

    doh = long_flow_trace(random.Random(1), 60, n_flows=12, min_packets=100, max_packets=3000,
                          server=("192.0.2.53", 443))
    bulk = long_flow_trace(random.Random(2), 1300, n_flows=12, min_packets=4, max_packets=40,
                           handshake_bytes=600, server=("198.51.100.80", 443))
    pcap = tmp_path / "mixed.pcap"
    write_pcap(pcap, sorted(doh + bulk, key=lambda p: p.ts_us))
    labels = tmp_path / "labels.csv"
    labels.write_text("ip,port,label\n192.0.2.53,443,doh-fixture\n198.51.100.80,,bulk\n")

    flows = tmp_path / "flows.jsonl"
    code, _, err = run(capsys, "analyze", "--pcap", pcap, "--group-by", labels, "--out", flows)
    assert code == 0
    assert {f.group for f in read_flows(flows)} == {"doh-fixture", "bulk"}

    points = tmp_path / "points.csv"
    code, out, _ = run(capsys, "characterize", "--flows", flows, "--out", points)
    assert code == 0
    assert points.read_text().splitlines()[0] == "group,packet_count,avg_payload"
    curves = {c["group"]: c for c in jsonl(out)}
    assert set(curves) == {"doh-fixture", "bulk"}

    model = tmp_path / "model.json"
    code, out, _ = run(capsys, "fit", "--points", points, "--out", model)
    assert code == 0
    fitted = json.loads(model.read_text())
    assert fitted["training_balanced_accuracy"] == 1.0

    code, out, err = run(capsys, "classify", "--flows", flows, "--model", model)
    assert code == 0
    rows = jsonl(out)
    assert all((r["label"] == "DoH") == (r["group"] == "doh-fixture") for r in rows)
    code, out, _ = run(capsys, "classify", "--flows", flows)
    assert code == 0 and len(jsonl(out)) == len(rows)

    code, out, _ = run(capsys, "report", "--flows", flows)
    assert code == 0 and "doh-fixture" in out


def test_analyze_groups_by_destination(capsys, tmp_path):
    import random

    pcap = tmp_path / "t.pcap"
    write_pcap(pcap, long_flow_trace(random.Random(0), 100, n_flows=3))
    code, out, _ = run(capsys, "analyze", "--pcap", pcap)
    assert code == 0
    rows = jsonl(out)
    assert len(rows) == 3 and {r["group"] for r in rows} == {"192.0.2.53"}
