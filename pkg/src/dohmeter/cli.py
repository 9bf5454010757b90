"""Command-line entry point: ``dohmeter <subcommand>``.

Every machine-readable line carries a ``schema`` field. Exit status is 0 on
success (per-item failures are reported, not fatal), 2 on configuration or
I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import ipaddress
import json
import sys
import threading
import warnings
from contextlib import ExitStack
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Optional, TextIO

from . import __version__
from .batch import BatchConfig, ConfigError, read_domains, run_query_batch, summarize
from .characterize import (
    ClassifierModel,
    InsufficientTail,
    classify_flow,
    curve_summary,
    default_model,
    fit_region,
    header_overhead_report,
    ratio_points,
    read_points,
    write_points,
)
from .client.http import ClientOptions, parse_tls_version
from .client.outcome import DohEndpoint, HttpPreference, QueryOutcome, ResolutionMethod
from .client.plain import parse_server
from .flows import (
    CaptureError,
    CaptureReader,
    EmptyGroup,
    Flow,
    LabelMap,
    TapProxy,
    assemble_flows,
    by_group,
    by_server_ip,
    flow_stats,
    read_flows,
)
from .flows.packets import TCP, UDP
from .prober import (
    EmptyIndex,
    ProbeOptions,
    ServerIndex,
    aggregate_index,
    load_targets,
    parse_interval,
    parse_timestamp,
    probe_all,
    run_monitor,
)
from .prober.probes import bootstrap_from_env, resolve_host

EXIT_OK = 0
EXIT_CONFIG = 2


class CliError(Exception):
    """Configuration or I/O problem; reported on stderr with exit status 2."""


# output helpers


class Output:
    """Serialized writer for JSONL or CSV rows (to a file or stdout)."""

    def __init__(self, stream: TextIO, fmt: str):
        self.stream = stream
        self.fmt = fmt
        self._lock = threading.Lock()
        self._csv: Optional[csv.DictWriter] = None

    def write(self, row: dict) -> None:
        with self._lock:
            if self.fmt == "jsonl":
                self.stream.write(json.dumps(row, sort_keys=True) + "\n")
                return
            flat = {k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in row.items()}
            if self._csv is None:
                self._csv = csv.DictWriter(self.stream, fieldnames=list(flat), extrasaction="ignore")
                self._csv.writeheader()
            self._csv.writerow(flat)


def _open_out(stack: ExitStack, path: Optional[str]) -> TextIO:
    if path is None or path == "-":
        return sys.stdout
    try:
        return stack.enter_context(open(path, "w", encoding="utf-8", newline=""))
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from None


def _info(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


# query


def _client_options(args) -> ClientOptions:
    try:
        min_tls = parse_tls_version(args.min_tls)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return ClientOptions(verify=not args.insecure, cafile=args.cafile, min_tls=min_tls)


def _dial_ip(endpoint: DohEndpoint) -> str:
    if endpoint.bootstrap_address:
        return endpoint.bootstrap_address
    addresses = resolve_host(endpoint.host, endpoint.port, bootstrap_from_env(), 5.0)
    for version in (4, 6):
        if addresses.get(version):
            return addresses[version][0]
    raise CliError(f"cannot resolve {endpoint.host}; pass --bootstrap or set BOOTSTRAP_RESOLVER")


def cmd_query(args) -> int:
    method = _parse_method(args.method)
    if args.domains_file:
        try:
            domains = read_domains(args.domains_file)
        except OSError as exc:
            raise CliError(f"cannot read {args.domains_file}: {exc}") from None
    else:
        domains = list(args.domain)
    if not domains:
        raise CliError("no domains given (positional names or --domains FILE)")
    endpoint = server = None
    if method.is_doh:
        if not args.url:
            raise CliError(f"method {method.value} needs --url")
        try:
            endpoint = DohEndpoint(args.url, HttpPreference(args.http), args.bootstrap)
        except ValueError as exc:
            raise CliError(str(exc)) from None
    else:
        if args.url or not args.server:
            raise CliError(f"method {method.value} needs --server ip[:port], not a DoH URL")
        try:
            server = parse_server(args.server)
        except ValueError as exc:
            raise CliError(f"bad --server: {exc}") from None

    with ExitStack() as stack:
        tap = None
        if args.capture:
            if method.is_doh:
                upstream = (_dial_ip(endpoint), endpoint.port)
            else:
                upstream = server
            listen = "::1" if ipaddress.ip_address(upstream[0]).version == 6 else "127.0.0.1"
            protocol = UDP if method is ResolutionMethod.PLAIN_UDP else TCP
            tap = TapProxy(upstream, protocol, listen_host=listen).start()
            stack.callback(tap.stop)
            if method.is_doh:
                endpoint = replace(endpoint, bootstrap_address=listen, dial_port=tap.port)
            else:
                server = tap.address
        try:
            config = BatchConfig(method, endpoint=endpoint, server=server, qtype=args.qtype,
                                 timeout=args.timeout, parallel=args.parallel, session=args.session,
                                 padding=args.padding, options=_client_options(args))
        except ConfigError as exc:
            raise CliError(str(exc)) from None
        out = Output(_open_out(stack, args.out), args.format)
        outcomes = run_query_batch(config, domains, on_outcome=lambda o: out.write(_outcome_row(o)))
        if tap is not None:
            tap.wait_idle()
            try:
                count = tap.write_pcap(args.capture)
            except OSError as exc:
                raise CliError(f"cannot write {args.capture}: {exc}") from None
            _info(args, f"captured {count} packets to {args.capture}")
    summary = summarize(outcomes)
    _info(args, json.dumps(summary.to_json(), sort_keys=True))
    return EXIT_OK


def _parse_method(text: str) -> ResolutionMethod:
    try:
        return ResolutionMethod.parse(text)
    except ValueError:
        raise CliError(f"unknown method {text!r}") from None


def _outcome_row(outcome: QueryOutcome) -> dict:
    return outcome.to_json()


# probe / monitor / stats


def _probe_options(args) -> ProbeOptions:
    resolver = None
    if args.bootstrap_resolver:
        try:
            resolver = parse_server(args.bootstrap_resolver)
        except ValueError as exc:
            raise CliError(f"bad --bootstrap-resolver: {exc}") from None
    return ProbeOptions(timeout=args.timeout, test_domain=args.test_domain, tls_legacy=args.tls_legacy,
                        ipv6=args.ipv6, verify=not args.insecure, cafile=args.cafile,
                        bootstrap_resolver=resolver)


def _targets(args):
    try:
        targets = load_targets(args.targets)
    except OSError as exc:
        raise CliError(f"cannot read {args.targets}: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not targets:
        raise CliError(f"{args.targets}: no targets")
    return targets


def _index(path: str) -> ServerIndex:
    index = ServerIndex(path)
    parent = index.path.parent
    if not parent.exists():
        raise CliError(f"directory {parent} does not exist")
    return index


def cmd_probe(args) -> int:
    targets = _targets(args)
    options = _probe_options(args)
    index = _index(args.out)
    reports = probe_all(targets, options, args.parallel)
    try:
        index.extend(reports)
    except OSError as exc:
        raise CliError(f"cannot append to {args.out}: {exc}") from None
    for report in reports:
        state = "available" if report.available else ("reachable" if report.reachable else "unreachable")
        _info(args, f"{report.provider} {report.url}: {state}")
    _info(args, f"appended {len(reports)} reports to {args.out}")
    return EXIT_OK


def cmd_monitor(args) -> int:
    targets = _targets(args)
    options = _probe_options(args)
    index = _index(args.out)
    try:
        interval = parse_interval(args.interval)
        result = run_monitor(targets, index, interval, cycles=args.cycles, stop=lambda: False,
                             options=options, parallel=args.parallel)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    except OSError as exc:
        raise CliError(f"index write failed: {exc}") from None
    _info(args, f"{result.cycles} cycles, {result.reports} reports appended to {args.out}")
    return EXIT_OK


def _at(args):
    if not args.at:
        return None
    try:
        return parse_timestamp(args.at)
    except ValueError:
        raise CliError(f"bad --at timestamp {args.at!r}") from None


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise CliError(f"{what} {path} not found")


def cmd_stats(args) -> int:
    _require_file(args.index, "index")
    try:
        stats = aggregate_index(ServerIndex(args.index), _at(args), args.bin_width, args.inactive_after)
    except EmptyIndex:
        print(json.dumps({"schema": "dohmeter.stats/1", "servers": 0, "note": "no data"}))
        return EXIT_OK
    with ExitStack() as stack:
        stream = _open_out(stack, args.out)
        if args.format == "csv":
            writer = csv.writer(stream)
            writer.writerow(["label", "count", "total", "percent"])
            for row in stats.rows + stats.extra_rows:
                writer.writerow([row.label, row.count, row.total,
                                 "" if row.percent is None else str(row.percent)])
        else:
            stream.write(json.dumps(stats.to_json(), sort_keys=True) + "\n")
    return EXIT_OK


# analyze / characterize / fit / classify


def _grouping(spec: Optional[str]) -> Callable[[Flow], Optional[str]]:
    if spec is None or spec == "none":
        return lambda flow: None
    if spec == "dst-ip":
        return by_server_ip
    try:
        return LabelMap.load(spec)
    except OSError as exc:
        raise CliError(f"cannot read label file {spec}: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_analyze(args) -> int:
    grouping = _grouping(args.group_by)
    packets = []
    for path in args.pcap:
        reader = CaptureReader(path)
        try:
            packets.extend(reader)
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc}") from None
        except CaptureError as exc:
            raise CliError(str(exc)) from None
        if reader.skipped_count:
            _info(args, f"{path}: skipped {reader.skipped_count} packets {dict(reader.skipped)}")
        if reader.truncated:
            _info(args, f"warning: {path} is truncated by snaplen; payload uses captured lengths")
        if reader.oversize:
            _info(args, f"warning: {path} has {reader.oversize} frames above the MTU (offloading)")
    flows = [f.with_group(grouping(f)) for f in assemble_flows(packets, args.idle_timeout)]
    with ExitStack() as stack:
        out = Output(_open_out(stack, args.out), args.format)
        for flow in flows:
            out.write(flow.to_json())
    _info(args, f"{len(packets)} packets, {len(flows)} flows")
    if not args.quiet:
        try:
            for summary in flow_stats(flows, by_group).values():
                print(f"{summary.group}: flows={summary.flows} median_payload={summary.median_payload_bytes} "
                      f"median_packets={summary.median_packets} median_duration_us={summary.median_duration_us}",
                      file=sys.stderr)
        except EmptyGroup:
            pass
    return EXIT_OK


def _load_flows(path: str) -> list[Flow]:
    _require_file(path, "flows file")
    try:
        return list(read_flows(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{path}: bad flow record: {exc}") from None


def cmd_characterize(args) -> int:
    flows = _load_flows(args.flows)
    if args.labels:
        flows = _grouping(args.labels).apply(flows)
    points = ratio_points(flows, by_group if (args.labels or any(f.group for f in flows)) else by_server_ip)
    try:
        write_points(args.out, points)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientTail)
        curves = curve_summary(points, args.threshold) if points else {}
    for curve in curves.values():
        print(json.dumps({"schema": "dohmeter.curve/1", **curve.to_json()}, sort_keys=True))
    _info(args, f"{len(points)} points written to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    _require_file(args.points, "points file")
    try:
        points = read_points(args.points)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    doh_groups = args.doh_groups.split(",") if args.doh_groups else None
    try:
        model = fit_region(points, doh_groups)
    except ValueError as exc:
        raise CliError(f"cannot fit: {exc}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientTail)
        curves = curve_summary(points, args.threshold)
    model = replace(model, reference_curves={g: c.tail_estimate for g, c in curves.items()
                                             if c.tail_estimate is not None})
    try:
        model.save(args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from None
    print(json.dumps(model.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_classify(args) -> int:
    if args.model is None:
        model = default_model()
    else:
        _require_file(args.model, "model")
        try:
            model = ClassifierModel.load(args.model)
        except (ValueError, KeyError) as exc:
            raise CliError(f"{args.model}: bad model: {exc}") from None
    flows = _load_flows(args.flows)
    counts = {"DoH": 0, "NonDoH": 0}
    with ExitStack() as stack:
        out = Output(_open_out(stack, args.out), args.format)
        for flow in flows:
            label, score = classify_flow(flow, model)
            counts[label] += 1
            out.write({
                "schema": "dohmeter.classification/1",
                "protocol": flow.protocol, "a_ip": flow.a_ip, "a_port": flow.a_port,
                "b_ip": flow.b_ip, "b_port": flow.b_port, "first_ts_us": flow.first_ts_us,
                "group": flow.group, "packet_count": flow.packet_count,
                "avg_payload": flow.avg_payload, "label": label, "score": round(score, 6),
            })
    _info(args, json.dumps(counts, sort_keys=True))
    return EXIT_OK


# report


def render_report(index_path: Optional[str], flows_path: Optional[str], at=None,
                  bin_width: int = 100, inactive_after: int = 2) -> tuple[str, dict]:
    """Human-readable text and JSON summary for an index and/or flow file."""
    lines: list[str] = []
    data: dict = {"schema": "dohmeter.report/1"}
    if index_path is not None:
        index = ServerIndex(index_path)
        try:
            stats = aggregate_index(index, at, bin_width, inactive_after)
        except EmptyIndex:
            lines.append("servers: no data")
            data["servers"] = None
        else:
            lines.append("DoH servers")
            lines.append(stats.render_table())
            experimental = stats.row("HTTP/1.1 only (experimental)")
            lines.append(f"HTTP/1.1 only (experimental) {experimental.count}")
            headers = header_overhead_report(e.report for e in index.latest(at, inactive_after)
                                             if e.report.available)
            lines.append(f"Header block sizes (bin {bin_width} B)")
            for start, count in headers.histogram.items():
                lines.append(f"  {start}-{start + bin_width - 1}: {count}")
            lines.append("Header names by server count")
            for name, count in headers.name_frequency.items():
                lines.append(f"  {name}: {count}")
            data["servers"] = stats.to_json()
            data["headers"] = headers.to_json()
    if flows_path is not None:
        flows = list(read_flows(flows_path))
        try:
            summaries = flow_stats(flows, by_group)
        except EmptyGroup:
            lines.append("flows: no data")
            data["flows"] = None
        else:
            lines.append("Flow medians (lower median)")
            lines.append(f"  {'group':<16}{'flows':>7}{'payload_B':>11}{'packets':>9}{'duration_ms':>13}")
            for s in summaries.values():
                lines.append(f"  {s.group:<16}{s.flows:>7}{s.median_payload_bytes:>11}{s.median_packets:>9}"
                             f"{s.median_duration_us / 1000:>13.3f}")
            data["flows"] = [vars(s) for s in summaries.values()]
    return "\n".join(lines), data


def cmd_report(args) -> int:
    if not args.index and not args.flows:
        raise CliError("report needs --index and/or --flows")
    for path, what in ((args.index, "index"), (args.flows, "flows file")):
        if path:
            _require_file(path, what)
    text, data = render_report(args.index, args.flows, _at(args), args.bin_width, args.inactive_after)
    print(text)
    if args.json:
        try:
            Path(args.json).write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {args.json}: {exc}") from None
    return EXIT_OK


# parser


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument("--timeout", type=float, default=default(5.0), help="per-operation timeout in seconds")
    parser.add_argument("--parallel", type=int, default=default(1), help="concurrent queries or probes")
    parser.add_argument("--format", choices=("jsonl", "csv"), default=default("jsonl"),
                        help="machine output format")
    parser.add_argument("--quiet", action="store_true", default=default(False), help="no progress on stderr")


def _tls_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cafile", help="extra CA bundle for certificate checks")
    parser.add_argument("--insecure", action="store_true", help="skip certificate verification")


def _probe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--targets", required=True, help="CSV with provider,url columns")
    parser.add_argument("--out", "--index", dest="out", required=True, help="index JSONL to append to")
    parser.add_argument("--tls-legacy", action="store_true", help="also test TLS 1.0 and 1.1")
    parser.add_argument("--ipv6", action="store_true", help="also test IPv6 reachability")
    parser.add_argument("--test-domain", default="example.com")
    parser.add_argument("--bootstrap-resolver", help="ip:port used to resolve server names")
    _tls_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dohmeter", description="DNS-over-HTTPS measurement toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("query", parents=[common], help="resolve domains with one method")
    p.add_argument("domain", nargs="*", help="domain names (or use --domains)")
    p.add_argument("--domains", dest="domains_file", help="file with one domain per line")
    p.add_argument("--method", default="get", help="udp, tcp, get, post or json")
    p.add_argument("--url", help="DoH endpoint URL")
    p.add_argument("--server", help="plain DNS server ip[:port]")
    p.add_argument("--bootstrap", help="IP address to dial instead of resolving the URL host")
    p.add_argument("--qtype", default="A")
    p.add_argument("--http", choices=("h1", "h2", "auto"), default="auto")
    p.add_argument("--session", action="store_true", help="reuse one connection per worker")
    p.add_argument("--padding", type=int, help="EDNS padding block size (wire methods)")
    p.add_argument("--min-tls", default="1.2")
    p.add_argument("--capture", help="write the exchanged packets to this pcap")
    p.add_argument("--out", help="outcome file (default stdout)")
    _tls_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("probe", parents=[common], help="probe DoH servers once")
    _probe_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("monitor", parents=[common], help="probe DoH servers periodically")
    _probe_flags(p)
    p.add_argument("--interval", default="6h", help="cycle interval, e.g. 90s, 15m, 6h (>= 1 minute)")
    p.add_argument("--cycles", type=int, help="number of cycles (default: run until interrupted)")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("stats", parents=[common], help="aggregate a server index")
    p.add_argument("--index", required=True)
    p.add_argument("--at", help="ISO 8601 time for the latest view")
    p.add_argument("--bin-width", type=int, default=100)
    p.add_argument("--inactive-after", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("analyze", parents=[common], help="pcap to flows")
    p.add_argument("--pcap", required=True, action="append", help="pcap or pcapng file (repeatable)")
    p.add_argument("--idle-timeout", type=float, default=300.0)
    p.add_argument("--group-by", default="dst-ip", help="dst-ip, none, or a label CSV (ip,port,label)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("characterize", parents=[common], help="flows to ratio points and curves")
    p.add_argument("--flows", required=True)
    p.add_argument("--labels", help="label CSV (ip,port,label)")
    p.add_argument("--threshold", type=int, default=1000)
    p.add_argument("--out", required=True, help="points CSV")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("fit", parents=[common], help="fit the DoH region classifier")
    p.add_argument("--points", required=True)
    p.add_argument("--doh-groups", help="comma-separated DoH groups (default: groups starting with 'doh')")
    p.add_argument("--threshold", type=int, default=1000)
    p.add_argument("--out", required=True, help="model JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", parents=[common], help="label flows with a fitted model")
    p.add_argument("--flows", required=True)
    p.add_argument("--model", help="model JSON (default: thresholds shipped with the package)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", parents=[common], help="tables for an index and/or flows")
    p.add_argument("--index")
    p.add_argument("--flows")
    p.add_argument("--at")
    p.add_argument("--bin-width", type=int, default=100)
    p.add_argument("--inactive-after", type=int, default=2)
    p.add_argument("--json", help="also write the JSON summary here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Iterable[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv) if argv is not None else None)
    if args.parallel < 1:
        parser.error("--parallel must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dohmeter: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
