from __future__ import annotations

import ipaddress
from dataclasses import dataclass

TCP = "TCP"
UDP = "UDP"
PROTOCOL_NUMBERS = {6: TCP, 17: UDP}
MTU = 1500


@dataclass(frozen=True)
class PacketRecord:
    """One TCP or UDP packet as seen on the wire.

    ``ts_us`` is microseconds since the epoch. ``payload_len`` counts
    transport payload bytes only (0 for pure ACKs); ``total_len`` is the
    on-wire frame length.
    """

    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: str
    payload_len: int
    total_len: int
    tcp_flags: int = 0

    def __post_init__(self) -> None:
        if self.protocol not in (TCP, UDP):
            raise ValueError(f"protocol must be TCP or UDP, not {self.protocol!r}")
        if not (0 <= self.src_port <= 65535 and 0 <= self.dst_port <= 65535):
            raise ValueError("ports must be in [0, 65535]")
        if not 0 <= self.payload_len <= self.total_len:
            raise ValueError("payload_len must be within [0, total_len]")

    @property
    def src(self) -> tuple[str, int]:
        return (self.src_ip, self.src_port)

    @property
    def dst(self) -> tuple[str, int]:
        return (self.dst_ip, self.dst_port)


def endpoint_sort_key(endpoint: tuple[str, int]) -> tuple[int, int, int]:
    ip = ipaddress.ip_address(endpoint[0])
    return (ip.version, int(ip), endpoint[1])
