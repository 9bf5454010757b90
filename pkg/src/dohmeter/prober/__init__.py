"""DoH server capability probing and the persisted server index."""

from .index import (
    CapabilityRow,
    EmptyIndex,
    IndexAggregate,
    IndexEntry,
    MonitorResult,
    ServerIndex,
    aggregate_index,
    header_histogram,
    latest_view,
    parse_interval,
    percent,
    run_monitor,
)
from .probes import (
    ProbeOptions,
    collect_headers,
    inspect_certificate,
    issuer_of,
    probe_all,
    probe_http_versions,
    probe_ip_versions,
    probe_methods,
    probe_target,
    probe_tls_versions,
)
from .report import ProbeReport, ProbeTarget, load_targets, parse_timestamp
