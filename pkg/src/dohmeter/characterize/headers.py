"""Response-header overhead across probed servers."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from ..prober.index import header_histogram
from ..prober.report import ProbeReport

REQUIRED_HEADERS = ("content-type", "content-length")


@dataclass(frozen=True)
class HeaderOverheadReport:
    servers: int
    histogram: dict[int, int]
    bin_width: int
    name_frequency: dict[str, int]  # servers sending each header name
    missing_required: dict[str, tuple[str, ...]]  # url -> required names it lacks

    @property
    def required_ok(self) -> bool:
        return not self.missing_required

    def share_below(self, size: int) -> float:
        """Fraction of servers whose header block is smaller than ``size``."""
        if not self.servers:
            return 0.0
        below = sum(count for start, count in self.histogram.items() if start + self.bin_width <= size)
        return below / self.servers

    def to_json(self) -> dict:
        return {
            "schema": "dohmeter.headers/1",
            "servers": self.servers,
            "bin_width": self.bin_width,
            "histogram": [
                {"bin_start": start, "bin_end": start + self.bin_width - 1, "count": count}
                for start, count in self.histogram.items()
            ],
            "name_frequency": self.name_frequency,
            "missing_required": {url: list(names) for url, names in self.missing_required.items()},
        }


def header_overhead_report(reports: Iterable[ProbeReport], bin_width: int = 100) -> HeaderOverheadReport:
    """Histogram of header-block sizes, per-name frequency and the
    content-type/content-length presence check, over reports that carry a
    header inventory (one per URL; later reports replace earlier ones)."""
    latest: dict[str, ProbeReport] = {}
    for report in reports:
        if report.response_header_items or report.response_header_bytes:
            current = latest.get(report.url)
            if current is None or report.timestamp >= current.timestamp:
                latest[report.url] = report
    frequency: Counter[str] = Counter()
    missing = {}
    for url in sorted(latest):
        names = {name.lower() for name, _ in latest[url].response_header_items}
        frequency.update(names)
        lacking = tuple(h for h in REQUIRED_HEADERS if h not in names)
        if lacking:
            missing[url] = lacking
    return HeaderOverheadReport(
        servers=len(latest),
        histogram=header_histogram((r.response_header_bytes for r in latest.values()), bin_width),
        bin_width=bin_width,
        name_frequency=dict(sorted(frequency.items(), key=lambda kv: (-kv[1], kv[0]))),
        missing_required=missing,
    )
