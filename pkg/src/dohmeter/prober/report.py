"""Probe targets and the per-server capability report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from ..client.outcome import DohEndpoint

REPORT_SCHEMA = "dohmeter.probe/1"

TLS_FACETS = ("v1_0", "v1_1", "v1_2", "v1_3")
LEGACY_TLS_FACETS = ("v1_0", "v1_1")


@dataclass(frozen=True)
class ProbeTarget:
    provider: str
    endpoint: DohEndpoint

    def __post_init__(self) -> None:
        if not self.provider.strip():
            raise ValueError("provider must be non-empty")

    @property
    def url(self) -> str:
        return self.endpoint.url

    @classmethod
    def from_url(cls, provider: str, url: str, bootstrap_address: Optional[str] = None) -> "ProbeTarget":
        return cls(provider, DohEndpoint(url, bootstrap_address=bootstrap_address))


def load_targets(path: str | Path) -> list[ProbeTarget]:
    """Read a ``provider,url`` CSV (an optional ``bootstrap_address`` column
    pins the dial address). Raises ValueError on malformed rows."""
    targets = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(line for line in f if not line.lstrip().startswith("#"))
        if reader.fieldnames is None or not {"provider", "url"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected CSV header with provider,url columns")
        for lineno, row in enumerate(reader, start=2):
            try:
                targets.append(ProbeTarget.from_url(
                    (row["provider"] or "").strip(), (row["url"] or "").strip(),
                    (row.get("bootstrap_address") or "").strip() or None))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return targets


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class ProbeReport:
    """Capabilities observed for one target at one instant.

    Boolean facets use ``None`` for "untestable" (legacy TLS without the
    opt-in flag, IPv6 without the opt-in flag), which is distinct from a
    failed attempt (``False``). When ``reachable`` is false every facet is
    false or untestable and the header inventory is empty.
    """

    provider: str
    url: str
    timestamp: datetime
    reachable: bool
    http: dict[str, bool] = field(default_factory=lambda: {"h1_1": False, "h2": False})
    tls: dict[str, Optional[bool]] = field(default_factory=lambda: dict.fromkeys(TLS_FACETS, False))
    ip: dict[str, Optional[bool]] = field(default_factory=lambda: {"v4": False, "v6": False})
    methods: dict[str, bool] = field(default_factory=lambda: {"get": False, "post": False, "json": False})
    rfc8484_content_type_ok: bool = False
    cert_issuer: Optional[str] = None
    lets_encrypt: bool = False
    response_header_items: tuple[tuple[str, str], ...] = ()
    response_header_bytes: int = 0
    header_http_version: Optional[str] = None
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def available(self) -> bool:
        """A server is available when GET or POST yields a valid DNS answer."""
        return self.reachable and (self.methods.get("get", False) or self.methods.get("post", False))

    @property
    def experimental(self) -> bool:
        """HTTP/1.1-only deployments are flagged as experimental."""
        return bool(self.http.get("h1_1")) and not self.http.get("h2")

    def capabilities(self) -> dict[str, Any]:
        """Every facet except timestamp and free-text errors, for comparisons."""
        data = self.to_json()
        for key in ("schema", "timestamp", "errors"):
            data.pop(key)
        return data

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["timestamp"] = self.timestamp.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")
        data["response_header_items"] = [list(item) for item in self.response_header_items]
        data["available"] = self.available
        data["experimental"] = self.experimental
        return {"schema": REPORT_SCHEMA, **data}

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ProbeReport":
        return cls(
            provider=data["provider"],
            url=data["url"],
            timestamp=parse_timestamp(data["timestamp"]),
            reachable=bool(data["reachable"]),
            http=dict(data.get("http", {})),
            tls=dict(data.get("tls", {})),
            ip=dict(data.get("ip", {})),
            methods=dict(data.get("methods", {})),
            rfc8484_content_type_ok=bool(data.get("rfc8484_content_type_ok", False)),
            cert_issuer=data.get("cert_issuer"),
            lets_encrypt=bool(data.get("lets_encrypt", False)),
            response_header_items=tuple(tuple(item) for item in data.get("response_header_items", [])),
            response_header_bytes=int(data.get("response_header_bytes", 0)),
            header_http_version=data.get("header_http_version"),
            errors=dict(data.get("errors", {})),
        )


def parse_timestamp(text: str | datetime) -> datetime:
    """ISO 8601 to an aware UTC datetime; naive input is taken as UTC."""
    if isinstance(text, datetime):
        value = text
    else:
        value = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)
