"""Append-only server index, Table-1 style aggregates and the monitor loop."""

from __future__ import annotations

import fcntl
import json
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from .probes import ProbeOptions, probe_all, probe_target
from .report import ProbeReport, ProbeTarget, parse_timestamp

DEFAULT_INACTIVE_AFTER = 2
MIN_INTERVAL = 60.0


class EmptyIndex(ValueError):
    pass


class ServerIndex:
    """ProbeReports persisted as JSON Lines.

    Appends are serialized by a process-local lock plus an advisory file
    lock, and each report is written with a single ``write`` call, so
    concurrent readers see whole lines. A torn final line (a crash mid-write)
    is ignored on read and counted in ``torn_lines``.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.torn_lines = 0

    def append(self, report: ProbeReport) -> None:
        self.extend([report])

    def extend(self, reports: Iterable[ProbeReport]) -> int:
        lines = "".join(r.to_jsonl() + "\n" for r in reports)
        if not lines:
            return 0
        with self._lock, open(self.path, "a+", encoding="utf-8") as f:
            fcntl.flock(f, fcntl.LOCK_EX)
            try:
                # Terminate a torn line left by a crash so new reports stay parseable.
                f.seek(0, 2)
                if f.tell() > 0:
                    f.seek(f.tell() - 1)
                    if f.read(1) != "\n":
                        lines = "\n" + lines
                f.write(lines)
                f.flush()
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)
        return lines.count("\n")

    def __iter__(self) -> Iterator[ProbeReport]:
        return iter(self.reports())

    def reports(self) -> list[ProbeReport]:
        if not self.path.exists():
            return []
        out = []
        self.torn_lines = 0
        with open(self.path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                try:
                    out.append(ProbeReport.from_json(json.loads(line)))
                except (ValueError, KeyError, TypeError):
                    self.torn_lines += 1
        return out

    def __len__(self) -> int:
        return len(self.reports())

    def latest(self, at: Optional[datetime] = None,
               inactive_after: int = DEFAULT_INACTIVE_AFTER) -> list["IndexEntry"]:
        return latest_view(self.reports(), at, inactive_after)


@dataclass(frozen=True)
class IndexEntry:
    """Latest report for one URL plus its failure streak.

    ``inactive`` is set once the newest ``inactive_after`` reports are all
    unavailable; nothing is ever deleted from the index.
    """

    report: ProbeReport
    consecutive_failures: int
    inactive: bool
    history: int


def latest_view(reports: Iterable[ProbeReport], at: Optional[datetime] = None,
                inactive_after: int = DEFAULT_INACTIVE_AFTER) -> list[IndexEntry]:
    if inactive_after < 1:
        raise ValueError("inactive_after must be >= 1")
    cutoff = parse_timestamp(at) if at is not None else None
    by_url: dict[str, list[ProbeReport]] = {}
    for report in reports:
        if cutoff is None or report.timestamp <= cutoff:
            by_url.setdefault(report.url, []).append(report)
    entries = []
    for url in sorted(by_url):
        history = sorted(by_url[url], key=lambda r: r.timestamp)
        streak = 0
        for report in reversed(history):
            if report.available:
                break
            streak += 1
        entries.append(IndexEntry(history[-1], streak, streak >= inactive_after, len(history)))
    return entries


def percent(count: int, total: int) -> Decimal:
    """round(count / total * 1000) / 10 with halves rounded up."""
    return (Decimal(count) * 100 / Decimal(total)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class CapabilityRow:
    label: str
    count: int
    total: int  # servers for which the facet was testable

    @property
    def percent(self) -> Optional[Decimal]:
        return percent(self.count, self.total) if self.total else None

    def render(self) -> str:
        value = f"{self.percent}%" if self.percent is not None else "untestable"
        return f"{self.label} {self.count} {value}"

    def to_json(self) -> dict:
        p = self.percent
        return {"label": self.label, "count": self.count, "total": self.total,
                "percent": float(p) if p is not None else None}


# (label, getter) in Table-1 order, followed by the extra facets.
TABLE_ROWS: tuple[tuple[str, Callable[[ProbeReport], Optional[bool]]], ...] = (
    ("HTTP2", lambda r: r.http.get("h2")),
    ("TLS1", lambda r: r.tls.get("v1_0")),
    ("TLS1.1", lambda r: r.tls.get("v1_1")),
    ("TLS1.2", lambda r: r.tls.get("v1_2")),
    ("TLS1.3", lambda r: r.tls.get("v1_3")),
    ("IPv4", lambda r: r.ip.get("v4")),
    ("IPv6", lambda r: r.ip.get("v6")),
    ("Let's Encrypt", lambda r: r.lets_encrypt),
)
EXTRA_ROWS: tuple[tuple[str, Callable[[ProbeReport], Optional[bool]]], ...] = (
    ("HTTP/1.1", lambda r: r.http.get("h1_1")),
    ("HTTP/1.1 only (experimental)", lambda r: r.experimental),
    ("GET", lambda r: r.methods.get("get")),
    ("POST", lambda r: r.methods.get("post")),
    ("JSON", lambda r: r.methods.get("json")),
    ("RFC 8484 content-type", lambda r: r.rfc8484_content_type_ok),
)


def header_histogram(sizes: Iterable[int], bin_width: int = 100) -> dict[int, int]:
    """Counts keyed by bin start: a size s lands in [k*w, k*w + w - 1]."""
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    counts = Counter((s // bin_width) * bin_width for s in sizes)
    return dict(sorted(counts.items()))


@dataclass(frozen=True)
class IndexAggregate:
    at: Optional[datetime]
    targets: int
    servers: int  # available servers (the percentage denominator)
    providers: int
    inactive: int
    rows: tuple[CapabilityRow, ...]
    extra_rows: tuple[CapabilityRow, ...]
    header_histogram: dict[int, int]
    bin_width: int
    inactive_urls: tuple[str, ...] = field(default=())

    def row(self, label: str) -> CapabilityRow:
        for row in self.rows + self.extra_rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def to_json(self) -> dict:
        return {
            "schema": "dohmeter.stats/1",
            "at": self.at.isoformat() if self.at else None,
            "targets": self.targets,
            "servers": self.servers,
            "providers": self.providers,
            "inactive": self.inactive,
            "inactive_urls": list(self.inactive_urls),
            "rows": [r.to_json() for r in self.rows],
            "extra_rows": [r.to_json() for r in self.extra_rows],
            "header_histogram": [
                {"bin_start": start, "bin_end": start + self.bin_width - 1, "count": count}
                for start, count in self.header_histogram.items()
            ],
        }

    def render_table(self) -> str:
        lines = [f"servers {self.servers} (providers {self.providers}, targets {self.targets}, "
                 f"inactive {self.inactive})"]
        lines += [row.render() for row in self.rows]
        return "\n".join(lines)


def aggregate_index(index: ServerIndex | Iterable[ProbeReport], at: Optional[datetime] = None,
                    bin_width: int = 100, inactive_after: int = DEFAULT_INACTIVE_AFTER) -> IndexAggregate:
    """Table-1 counts over the latest report per URL at time ``at``.

    Percentages are taken over currently available servers (GET or POST
    answered); for opt-in facets the denominator is the servers on which
    the facet was testable. Pure function of the reports and ``at``.
    """
    reports = index.reports() if isinstance(index, ServerIndex) else list(index)
    entries = latest_view(reports, at, inactive_after)
    if not entries:
        raise EmptyIndex("index has no reports at the requested time")
    live = [e.report for e in entries if e.report.available]

    def build(rows):
        out = []
        for label, getter in rows:
            values = [getter(r) for r in live]
            testable = [v for v in values if v is not None]
            out.append(CapabilityRow(label, sum(1 for v in testable if v), len(testable)))
        return tuple(out)

    return IndexAggregate(
        at=parse_timestamp(at) if at is not None else None,
        targets=len(entries),
        servers=len(live),
        providers=len({r.provider for r in live}),
        inactive=sum(e.inactive for e in entries),
        rows=build(TABLE_ROWS),
        extra_rows=build(EXTRA_ROWS),
        header_histogram=header_histogram((r.response_header_bytes for r in live if r.response_header_bytes),
                                          bin_width),
        bin_width=bin_width,
        inactive_urls=tuple(e.report.url for e in entries if e.inactive),
    )


_INTERVAL = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhd]?)\s*$")


def parse_interval(text: str) -> float:
    """"90", "90s", "15m", "6h", "1d" to seconds."""
    match = _INTERVAL.match(text)
    if not match:
        raise ValueError(f"bad interval {text!r}")
    scale = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400}[match.group(2)]
    return float(match.group(1)) * scale


@dataclass(frozen=True)
class MonitorResult:
    cycles: int
    reports: int


def run_monitor(targets: Sequence[ProbeTarget], index: ServerIndex, interval: float,
                cycles: Optional[int] = None, stop: Optional[Callable[[], bool]] = None,
                options: ProbeOptions = ProbeOptions(), parallel: int = 4,
                sleep: Callable[[float], None] = time.sleep,
                probe: Callable[[ProbeTarget, ProbeOptions], ProbeReport] = probe_target) -> MonitorResult:
    """Probe every target each cycle and append the reports.

    Runs until ``cycles`` complete or ``stop()`` returns true (checked
    before each cycle). Reports of one cycle are appended together after the
    cycle, so a crash loses at most the cycle in progress.
    """
    if interval < MIN_INTERVAL:
        raise ValueError(f"interval must be at least {MIN_INTERVAL:.0f} seconds")
    if cycles is None and stop is None:
        raise ValueError("run_monitor needs cycles or a stop condition")
    done = appended = 0
    while (cycles is None or done < cycles) and not (stop is not None and stop()):
        if done:
            sleep(interval)
        appended += index.extend(probe_all(targets, options, parallel, probe))
        done += 1
    return MonitorResult(done, appended)
