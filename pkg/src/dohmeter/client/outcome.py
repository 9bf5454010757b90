from __future__ import annotations

import enum
import ipaddress
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Optional
from urllib.parse import urlsplit

from ..codec import DnsMessage, qtype_to_text

OUTCOME_SCHEMA = "dohmeter.outcome/1"


class ResolutionMethod(str, enum.Enum):
    PLAIN_UDP = "udp"
    PLAIN_TCP = "tcp"
    DOH_GET = "get"
    DOH_POST = "post"
    DOH_JSON = "json"

    @property
    def is_doh(self) -> bool:
        return self in (ResolutionMethod.DOH_GET, ResolutionMethod.DOH_POST, ResolutionMethod.DOH_JSON)

    @classmethod
    def parse(cls, value: "str | ResolutionMethod") -> "ResolutionMethod":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        aliases = {"plainudp": "udp", "plaintcp": "tcp", "dohget": "get", "dohpost": "post", "dohjson": "json"}
        return cls(aliases.get(text.replace("_", "").replace("-", ""), text))


class HttpPreference(str, enum.Enum):
    H1 = "h1"
    H2 = "h2"
    AUTO = "auto"

    @property
    def alpn(self) -> list[str]:
        return {"h1": ["http/1.1"], "h2": ["h2"], "auto": ["h2", "http/1.1"]}[self.value]


@dataclass(frozen=True)
class DohEndpoint:
    """A DoH server target.

    ``bootstrap_address`` is dialled instead of resolving ``host``; the host
    name is still used for SNI, certificate checks and the Host header.
    ``dial_port`` likewise overrides only the TCP port dialled (used to route
    a connection through a recording relay without changing the URL).
    """

    url: str
    preferred_http: HttpPreference = HttpPreference.AUTO
    bootstrap_address: Optional[str] = None
    dial_port: Optional[int] = None
    host: str = field(init=False)
    port: int = field(init=False)
    path: str = field(init=False)

    def __post_init__(self) -> None:
        parts = urlsplit(self.url)
        if parts.scheme != "https":
            raise ValueError(f"DoH endpoint must use https: {self.url!r}")
        if not parts.hostname:
            raise ValueError(f"DoH endpoint has no host: {self.url!r}")
        try:
            port = 443 if parts.port is None else parts.port
        except ValueError as exc:
            raise ValueError(f"bad port in {self.url!r}: {exc}") from None
        if not 1 <= port <= 65535:
            raise ValueError(f"port out of range in {self.url!r}")
        if self.bootstrap_address is not None:
            ipaddress.ip_address(self.bootstrap_address)
        if self.dial_port is not None and not 1 <= self.dial_port <= 65535:
            raise ValueError(f"dial_port out of range: {self.dial_port}")
        object.__setattr__(self, "preferred_http", HttpPreference(self.preferred_http))
        object.__setattr__(self, "host", parts.hostname)
        object.__setattr__(self, "port", port)
        object.__setattr__(self, "path", parts.path or "/")

    @property
    def authority(self) -> str:
        host = f"[{self.host}]" if ":" in self.host else self.host
        return host if self.port == 443 else f"{host}:{self.port}"

    @property
    def dial_address(self) -> tuple[str, int]:
        return (self.bootstrap_address or self.host, self.dial_port or self.port)


@dataclass(frozen=True)
class Timing:
    start: float
    first_byte: float
    end: float

    def __post_init__(self) -> None:
        if not self.start <= self.first_byte <= self.end:
            raise ValueError("timing must satisfy start <= first_byte <= end")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Answer:
    name: str
    rtype: int
    ttl: int
    data: str


def answers_from_message(msg: DnsMessage) -> tuple[Answer, ...]:
    return tuple(Answer(str(rr.name), rr.rtype, rr.ttl, rr.rdata_text()) for rr in msg.answers)


@dataclass(frozen=True)
class QueryOutcome:
    """Result of one resolution attempt.

    ``rcode`` is None exactly when the transport failed; ``error`` then holds
    the exception class and message. Byte counters are application-layer
    (DNS payloads for plain DNS, HTTP bytes before TLS for DoH).
    """

    method: ResolutionMethod
    qname: str
    qtype: int
    rcode: Optional[int]
    answers: tuple[Answer, ...] = ()
    timing: Optional[Timing] = None
    app_bytes_sent: int = 0
    app_bytes_received: int = 0
    http_status: Optional[int] = None
    http_version: Optional[str] = None
    response_headers: Optional[tuple[tuple[str, str], ...]] = None
    truncated_retried: bool = False
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.rcode is not None

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["method"] = self.method.value
        data["qtype_name"] = qtype_to_text(self.qtype)
        data["answers"] = [asdict(a) for a in self.answers]
        if self.response_headers is not None:
            data["response_headers"] = [list(h) for h in self.response_headers]
        return {"schema": OUTCOME_SCHEMA, **data}

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "QueryOutcome":
        timing = data.get("timing")
        headers = data.get("response_headers")
        return cls(
            method=ResolutionMethod(data["method"]),
            qname=data["qname"],
            qtype=data["qtype"],
            rcode=data.get("rcode"),
            answers=tuple(Answer(**a) for a in data.get("answers", [])),
            timing=Timing(**timing) if timing else None,
            app_bytes_sent=data.get("app_bytes_sent", 0),
            app_bytes_received=data.get("app_bytes_received", 0),
            http_status=data.get("http_status"),
            http_version=data.get("http_version"),
            response_headers=tuple(tuple(h) for h in headers) if headers is not None else None,
            truncated_retried=data.get("truncated_retried", False),
            error=data.get("error"),
        )
