"""Bidirectional flow assembly and per-group flow statistics."""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass
from itertools import groupby
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from .packets import PacketRecord, endpoint_sort_key

FLOW_SCHEMA = "dohmeter.flow/1"
DEFAULT_IDLE_TIMEOUT = 300.0

FlowKey = tuple[str, str, int, str, int]  # protocol, a_ip, a_port, b_ip, b_port


class EmptyGroup(ValueError):
    pass


def flow_key(p: PacketRecord) -> tuple[FlowKey, bool]:
    """Canonical key (smaller endpoint first) and whether p travels a->b."""
    if endpoint_sort_key(p.src) <= endpoint_sort_key(p.dst):
        return (p.protocol, p.src_ip, p.src_port, p.dst_ip, p.dst_port), True
    return (p.protocol, p.dst_ip, p.dst_port, p.src_ip, p.src_port), False


@dataclass(frozen=True)
class Flow:
    """Aggregate of one bidirectional 5-tuple within an idle timeout.

    ``server_*`` is the destination of the flow's first packet (ties on the
    first timestamp resolve to the a->b packet), so a DoH client flow has
    the resolver as its server.
    """

    protocol: str
    a_ip: str
    a_port: int
    b_ip: str
    b_port: int
    first_ts_us: int
    last_ts_us: int
    packet_count: int
    payload_bytes: int
    a_to_b_packets: int
    a_to_b_bytes: int
    b_to_a_packets: int
    b_to_a_bytes: int
    server_is_b: bool = True
    group: Optional[str] = None

    @property
    def key(self) -> FlowKey:
        return (self.protocol, self.a_ip, self.a_port, self.b_ip, self.b_port)

    @property
    def duration_us(self) -> int:
        return self.last_ts_us - self.first_ts_us

    @property
    def duration(self) -> float:
        return self.duration_us / 1e6

    @property
    def avg_payload(self) -> float:
        return self.payload_bytes / self.packet_count

    @property
    def server(self) -> tuple[str, int]:
        return (self.b_ip, self.b_port) if self.server_is_b else (self.a_ip, self.a_port)

    @property
    def client(self) -> tuple[str, int]:
        return (self.a_ip, self.a_port) if self.server_is_b else (self.b_ip, self.b_port)

    def with_group(self, group: Optional[str]) -> "Flow":
        return Flow(**{**asdict(self), "group": group})

    def to_json(self) -> dict:
        data = asdict(self)
        data.update(
            schema=FLOW_SCHEMA,
            duration_us=self.duration_us,
            avg_payload=self.avg_payload,
            server_ip=self.server[0],
            server_port=self.server[1],
        )
        return data

    @classmethod
    def from_json(cls, data: dict) -> "Flow":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in data.items() if k in fields})


def _build(key: FlowKey, packets: list[tuple[PacketRecord, bool]]) -> Flow:
    ab = [p for p, forward in packets if forward]
    ba = [p for p, forward in packets if not forward]
    first_ts = packets[0][0].ts_us
    # Server = destination of the earliest packet; a->b wins ties.
    server_is_b = any(forward for p, forward in packets if p.ts_us == first_ts)
    return Flow(
        *key,
        first_ts_us=first_ts,
        last_ts_us=packets[-1][0].ts_us,
        packet_count=len(packets),
        payload_bytes=sum(p.payload_len for p, _ in packets),
        a_to_b_packets=len(ab),
        a_to_b_bytes=sum(p.payload_len for p in ab),
        b_to_a_packets=len(ba),
        b_to_a_bytes=sum(p.payload_len for p in ba),
        server_is_b=server_is_b,
    )


def assemble_flows(packets: Iterable[PacketRecord], idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list[Flow]:
    """Group packets into flows; a gap longer than ``idle_timeout`` seconds
    within one key starts a new flow. FIN/RST do not end flows.

    Input order does not matter. Output is sorted by (first_ts_us, key).
    """
    timeout_us = round(idle_timeout * 1_000_000)
    keyed = []
    for p in packets:
        key, forward = flow_key(p)
        keyed.append((key, p.ts_us, p, forward))
    keyed.sort(key=lambda item: (item[0], item[1]))
    flows = []
    for key, items in groupby(keyed, key=lambda item: item[0]):
        current: list[tuple[PacketRecord, bool]] = []
        last_ts = None
        for _, ts, p, forward in items:
            if last_ts is not None and ts - last_ts > timeout_us:
                flows.append(_build(key, current))
                current = []
            current.append((p, forward))
            last_ts = ts
        flows.append(_build(key, current))
    flows.sort(key=lambda f: (f.first_ts_us, f.key))
    return flows


@dataclass(frozen=True)
class FlowSetSummary:
    """Lower medians (``statistics.median_low``) over one group of flows."""

    group: str
    flows: int
    median_payload_bytes: int
    median_packets: int
    median_duration_us: int

    @property
    def median_duration(self) -> float:
        return self.median_duration_us / 1e6


GroupSelector = Callable[[Flow], Optional[str]]


def by_server_ip(flow: Flow) -> str:
    return flow.server[0]


def by_group(flow: Flow) -> Optional[str]:
    return flow.group


def flow_stats(flows: Iterable[Flow], group_by: GroupSelector = by_group,
               groups: Optional[Iterable[str]] = None) -> dict[str, FlowSetSummary]:
    """Median payload, packet count and duration per group.

    Flows whose selector returns None are ignored. Requesting a group in
    ``groups`` that has no flows raises EmptyGroup.
    """
    buckets: dict[str, list[Flow]] = {}
    for flow in flows:
        label = group_by(flow)
        if label is not None:
            buckets.setdefault(str(label), []).append(flow)
    for name in groups or ():
        if not buckets.get(name):
            raise EmptyGroup(f"group {name!r} has no flows")
    if not buckets:
        raise EmptyGroup("no flows to summarize")
    return {
        name: FlowSetSummary(
            group=name,
            flows=len(members),
            median_payload_bytes=statistics.median_low(f.payload_bytes for f in members),
            median_packets=statistics.median_low(f.packet_count for f in members),
            median_duration_us=statistics.median_low(f.duration_us for f in members),
        )
        for name, members in sorted(buckets.items())
    }


def write_flows(path: str | Path, flows: Iterable[Flow]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for flow in flows:
            f.write(json.dumps(flow.to_json(), sort_keys=True) + "\n")
            count += 1
    return count


def read_flows(path: str | Path) -> Iterator[Flow]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield Flow.from_json(json.loads(line))
