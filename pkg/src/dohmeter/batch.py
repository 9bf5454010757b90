"""Run one resolution method over a list of domains."""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from .client.doh import DohSession
from .client.errors import QueryError
from .client.http import ClientOptions
from .client.outcome import DohEndpoint, QueryOutcome, ResolutionMethod
from .client.padding import apply_edns_padding
from .client.plain import Server, query_plain_tcp, query_plain_udp
from .codec import DnsError, make_query, qtype_from_text


class ConfigError(ValueError):
    """Invalid combination of batch settings."""


@dataclass(frozen=True)
class BatchConfig:
    """What to run. DoH methods need ``endpoint``; plain DNS needs ``server``.

    ``session`` keeps one connection per worker thread open across queries
    (the long-flow mode); otherwise each DoH query opens its own connection.
    """

    method: ResolutionMethod
    endpoint: Optional[DohEndpoint] = None
    server: Optional[Server] = None
    qtype: str = "A"
    timeout: float = 5.0
    parallel: int = 1
    session: bool = False
    padding: Optional[int] = None
    options: ClientOptions = field(default_factory=ClientOptions)

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", ResolutionMethod.parse(self.method))
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.method.is_doh and self.endpoint is None:
            raise ConfigError(f"method {self.method.value} needs a DoH endpoint URL")
        if not self.method.is_doh and self.server is None:
            raise ConfigError(f"method {self.method.value} needs a plain DNS server address")
        if self.padding is not None and (self.padding < 1 or self.method is ResolutionMethod.DOH_JSON):
            raise ConfigError("padding needs a block size >= 1 and a wire-format method")
        try:
            qtype_from_text(self.qtype)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def read_domains(path: str | Path) -> list[str]:
    """One domain per line; blank lines and '#' comments are ignored."""
    domains = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            text = line.split("#", 1)[0].strip()
            if text:
                domains.append(text)
    return domains


def _failure(config: BatchConfig, domain: str, exc: Exception) -> QueryOutcome:
    qname = domain if domain.endswith(".") else domain + "."
    return QueryOutcome(method=config.method, qname=qname, qtype=qtype_from_text(config.qtype),
                        rcode=None, error=f"{type(exc).__name__}: {exc}")


def _query_id(method: ResolutionMethod) -> int:
    # DoH uses id 0 for cacheability; plain DNS uses a random id checked on reply.
    return 0 if method.is_doh else int.from_bytes(os.urandom(2), "big")


def run_query_batch(config: BatchConfig, domains: Iterable[str],
                    on_outcome: Optional[Callable[[QueryOutcome], None]] = None) -> list[QueryOutcome]:
    """Resolve every domain; results keep input order.

    Per-domain failures become outcomes with ``rcode=None`` and ``error``
    set. ``on_outcome`` is called from worker threads as results arrive.
    """
    domains = list(domains)
    local = threading.local()
    sessions: list[DohSession] = []
    sessions_lock = threading.Lock()
    qtype = qtype_from_text(config.qtype)

    def session() -> DohSession:
        current = getattr(local, "session", None)
        if current is None:
            current = DohSession(config.endpoint, config.options, config.timeout, reuse=config.session)
            local.session = current
            with sessions_lock:
                sessions.append(current)
        return current

    def one(domain: str) -> QueryOutcome:
        try:
            if config.method is ResolutionMethod.DOH_JSON:
                outcome = session().json(domain, config.qtype)
            else:
                q = make_query(domain, qtype, _query_id(config.method))
                if config.padding:
                    q = apply_edns_padding(q, config.padding)
                if config.method is ResolutionMethod.PLAIN_UDP:
                    outcome = query_plain_udp(config.server, q, config.timeout)
                elif config.method is ResolutionMethod.PLAIN_TCP:
                    outcome = query_plain_tcp(config.server, q, config.timeout)
                else:
                    outcome = session().query(config.method, q)
        except (QueryError, DnsError) as exc:
            outcome = _failure(config, domain, exc)
        if on_outcome is not None:
            on_outcome(outcome)
        return outcome

    try:
        if config.parallel == 1:
            return [one(d) for d in domains]
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            return list(pool.map(one, domains))
    finally:
        for s in sessions:
            s.close()


@dataclass(frozen=True)
class BatchSummary:
    total: int
    succeeded: int
    failed: int

    def to_json(self) -> dict:
        return {"schema": "dohmeter.batch-summary/1", "total": self.total,
                "succeeded": self.succeeded, "failed": self.failed}


def summarize(outcomes: Iterable[QueryOutcome]) -> BatchSummary:
    outcomes = list(outcomes)
    ok = sum(1 for o in outcomes if o.ok)
    return BatchSummary(len(outcomes), ok, len(outcomes) - ok)
