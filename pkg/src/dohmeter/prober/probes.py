"""Capability probes for one DoH server.

Each facet (TLS versions, HTTP versions, IP versions, methods, certificate,
header inventory) is attempted independently; a failure in one facet is
recorded in ``ProbeReport.errors`` and never erases the others.
"""

from __future__ import annotations

import ipaddress
import os
import socket
import ssl
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

from cryptography import x509
from cryptography.x509.oid import NameOID

from ..client.doh import DNS_MESSAGE, DohSession, check_wire_response, wire_request
from ..client.errors import QueryError
from ..client.http import ClientOptions, HttpResponse, set_tls_window
from ..client.outcome import ResolutionMethod
from ..client.plain import Server, parse_server, query_plain_udp
from ..codec import AAAA, A, make_query
from .report import LEGACY_TLS_FACETS, ProbeReport, ProbeTarget, utc_now

BOOTSTRAP_ENV = "BOOTSTRAP_RESOLVER"

_TLS_PINS = {
    "v1_0": (ssl.TLSVersion.TLSv1, getattr(ssl, "HAS_TLSv1", False)),
    "v1_1": (ssl.TLSVersion.TLSv1_1, getattr(ssl, "HAS_TLSv1_1", False)),
    "v1_2": (ssl.TLSVersion.TLSv1_2, getattr(ssl, "HAS_TLSv1_2", True)),
    "v1_3": (ssl.TLSVersion.TLSv1_3, getattr(ssl, "HAS_TLSv1_3", True)),
}


def bootstrap_from_env() -> Optional[Server]:
    value = os.environ.get(BOOTSTRAP_ENV, "").strip()
    return parse_server(value) if value else None


@dataclass(frozen=True)
class ProbeOptions:
    """Knobs shared by every facet.

    ``tls_legacy`` and ``ipv6`` are opt-in; without them the TLS 1.0/1.1 and
    IPv6 facets report None (untestable) rather than False.
    """

    timeout: float = 5.0
    test_domain: str = "example.com"
    tls_legacy: bool = False
    ipv6: bool = False
    verify: bool = True
    cafile: Optional[str] = None
    bootstrap_resolver: Optional[Server] = None

    def client_options(self, alpn: Optional[Sequence[str]] = None) -> ClientOptions:
        floor = ssl.TLSVersion.TLSv1 if self.tls_legacy else ssl.TLSVersion.TLSv1_2
        return ClientOptions(verify=self.verify, cafile=self.cafile, min_tls=floor, alpn=alpn)


def _handshake(target: ProbeTarget, options: ProbeOptions, minimum: ssl.TLSVersion,
               maximum: Optional[ssl.TLSVersion]) -> ssl.SSLSocket:
    """TLS handshake without certificate checks: version support and the
    issuer are properties of the deployment, not of our trust store."""
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    set_tls_window(ctx, minimum, maximum)
    raw = socket.create_connection(target.endpoint.dial_address, timeout=options.timeout)
    try:
        return ctx.wrap_socket(raw, server_hostname=target.endpoint.host)
    except BaseException:
        raw.close()
        raise


def probe_tls_versions(target: ProbeTarget, options: ProbeOptions = ProbeOptions(),
                       errors: Optional[dict[str, str]] = None) -> dict[str, Optional[bool]]:
    """One handshake per version with min = max pinned to that version."""
    result: dict[str, Optional[bool]] = {}
    for facet, (version, built_in) in _TLS_PINS.items():
        if (facet in LEGACY_TLS_FACETS and not options.tls_legacy) or not built_in:
            result[facet] = None
            continue
        try:
            sock = _handshake(target, options, version, version)
        except (OSError, ssl.SSLError) as exc:
            result[facet] = False
            if errors is not None:
                errors[f"tls.{facet}"] = f"{type(exc).__name__}: {exc}"
        else:
            result[facet] = sock.version() == _version_name(version)
            sock.close()
    return result


def _version_name(version: ssl.TLSVersion) -> str:
    return {ssl.TLSVersion.TLSv1: "TLSv1", ssl.TLSVersion.TLSv1_1: "TLSv1.1",
            ssl.TLSVersion.TLSv1_2: "TLSv1.2", ssl.TLSVersion.TLSv1_3: "TLSv1.3"}[version]


def _probe_query(options: ProbeOptions):
    return make_query(options.test_domain, A, 0)


def probe_http_versions(target: ProbeTarget, options: ProbeOptions = ProbeOptions(),
                        errors: Optional[dict[str, str]] = None) -> dict[str, bool]:
    """Offer exactly one ALPN protocol and require a DoH GET to succeed on
    the connection. A server that ignores ALPN speaks HTTP/1.1."""
    result = {}
    for facet, alpn, expected in (("h2", "h2", "HTTP/2"), ("h1_1", "http/1.1", "HTTP/1.1")):
        session = DohSession(target.endpoint, options.client_options([alpn]), options.timeout, reuse=False)
        try:
            outcome = session.get(_probe_query(options), strict_content_type=False)
            result[facet] = outcome.http_version == expected
        except QueryError as exc:
            result[facet] = False
            if errors is not None:
                errors[f"http.{facet}"] = f"{type(exc).__name__}: {exc}"
        finally:
            session.close()
    return result


def resolve_host(host: str, port: int, resolver: Optional[Server], timeout: float) -> dict[int, list[str]]:
    """Addresses per IP version for ``host``, via ``resolver`` when given
    (plain DNS A and AAAA queries) or the system resolver otherwise."""
    try:
        literal = ipaddress.ip_address(host)
    except ValueError:
        literal = None
    if literal is not None:
        return {literal.version: [str(literal)]}
    found: dict[int, list[str]] = {4: [], 6: []}
    if resolver is not None:
        for qtype, version in ((A, 4), (AAAA, 6)):
            try:
                outcome = query_plain_udp(resolver, make_query(host, qtype, _query_id()), timeout)
            except QueryError:
                continue
            found[version] = [a.data for a in outcome.answers if a.rtype == qtype]
        return found
    try:
        infos = socket.getaddrinfo(host, port, type=socket.SOCK_STREAM)
    except socket.gaierror:
        return found
    for family, _, _, _, sockaddr in infos:
        version = 6 if family == socket.AF_INET6 else 4
        if sockaddr[0] not in found[version]:
            found[version].append(sockaddr[0])
    return found


def _query_id() -> int:
    return int.from_bytes(os.urandom(2), "big")


def probe_ip_versions(target: ProbeTarget, options: ProbeOptions = ProbeOptions(),
                      errors: Optional[dict[str, str]] = None) -> dict[str, Optional[bool]]:
    """v4/v6 true iff a TCP connection to the endpoint port succeeds on an
    address of that family."""
    endpoint = target.endpoint
    resolver = options.bootstrap_resolver or bootstrap_from_env()
    addresses = resolve_host(endpoint.host, endpoint.port, resolver, options.timeout)
    result: dict[str, Optional[bool]] = {}
    for facet, version in (("v4", 4), ("v6", 6)):
        if version == 6 and not options.ipv6:
            result[facet] = None
            continue
        result[facet] = False
        for address in addresses.get(version, []):
            try:
                socket.create_connection((address, endpoint.port), timeout=options.timeout).close()
            except OSError as exc:
                if errors is not None:
                    errors[f"ip.{facet}"] = f"{address}: {exc}"
                continue
            result[facet] = True
            if errors is not None:
                errors.pop(f"ip.{facet}", None)
            break
        else:
            if errors is not None and not addresses.get(version):
                errors[f"ip.{facet}"] = f"no IPv{version} address for {endpoint.host}"
    return result


@dataclass
class MethodResults:
    methods: dict[str, bool]
    rfc8484_content_type_ok: bool
    get_response: Optional[HttpResponse]


def probe_methods(target: ProbeTarget, options: ProbeOptions = ProbeOptions(),
                  errors: Optional[dict[str, str]] = None) -> MethodResults:
    """GET, POST and JSON against ``options.test_domain``.

    Wrong content types do not fail GET/POST (the body must still decode as
    a DNS response); they only clear ``rfc8484_content_type_ok``.
    """
    q = _probe_query(options)
    methods = {"get": False, "post": False, "json": False}
    content_types = []
    get_response = None
    session = DohSession(target.endpoint, options.client_options(), options.timeout, reuse=False)
    try:
        for name, method in (("get", ResolutionMethod.DOH_GET), ("post", ResolutionMethod.DOH_POST)):
            try:
                response = session.exchange(*wire_request(method, target.endpoint, q))
                if name == "get":
                    get_response = response
                check_wire_response(response, q, strict_content_type=False)
            except QueryError as exc:
                if errors is not None:
                    errors[f"methods.{name}"] = f"{type(exc).__name__}: {exc}"
                continue
            methods[name] = True
            content_types.append(response.content_type)
        try:
            session.json(options.test_domain, "A")
            methods["json"] = True
        except QueryError as exc:
            if errors is not None:
                errors["methods.json"] = f"{type(exc).__name__}: {exc}"
    finally:
        session.close()
    ct_ok = bool(content_types) and all(ct == DNS_MESSAGE for ct in content_types)
    return MethodResults(methods, ct_ok, get_response)


def headers_of(response: HttpResponse) -> tuple[tuple[tuple[str, str], ...], int]:
    return tuple((n.lower(), v) for n, v in response.headers), response.header_bytes


def collect_headers(target: ProbeTarget, options: ProbeOptions = ProbeOptions()) -> tuple[tuple[tuple[str, str], ...], int]:
    """(lowercased header items, header bytes) of a DoH GET response.

    HTTP/1.1 counts the raw status line and header block including the
    terminating blank line; HTTP/2 counts the decompressed header list size
    (name + value + 32 per field, ``:status`` included).
    """
    q = _probe_query(options)
    with DohSession(target.endpoint, options.client_options(), options.timeout, reuse=False) as session:
        response = session.exchange(*wire_request(ResolutionMethod.DOH_GET, target.endpoint, q))
    return headers_of(response)


def issuer_of(der: bytes) -> tuple[str, bool]:
    cert = x509.load_der_x509_certificate(der)
    orgs = [attr.value for attr in cert.issuer.get_attributes_for_oid(NameOID.ORGANIZATION_NAME)]
    lets_encrypt = any("let's encrypt" in str(org).lower() for org in orgs)
    return cert.issuer.rfc4514_string(), lets_encrypt


def inspect_certificate(target: ProbeTarget, options: ProbeOptions = ProbeOptions()) -> tuple[str, bool]:
    """Issuer of the leaf certificate and whether its organization names
    Let's Encrypt."""
    floor = ssl.TLSVersion.TLSv1 if options.tls_legacy else ssl.TLSVersion.TLSv1_2
    sock = _handshake(target, options, floor, None)
    try:
        der = sock.getpeercert(binary_form=True)
    finally:
        sock.close()
    if not der:
        raise ssl.SSLError("server presented no certificate")
    return issuer_of(der)


def _guard(errors: dict[str, str], facet: str, fn: Callable, default):
    try:
        return fn()
    except Exception as exc:  # facet isolation: record and continue
        errors[facet] = f"{type(exc).__name__}: {exc}"
        return default


def probe_target(target: ProbeTarget, options: ProbeOptions = ProbeOptions()) -> ProbeReport:
    errors: dict[str, str] = {}
    timestamp = utc_now()
    tls = _guard(errors, "tls", lambda: probe_tls_versions(target, options, errors),
                 {facet: False for facet in _TLS_PINS})
    reachable = any(value for value in tls.values())
    if not reachable:
        errors.setdefault("reachable", f"no TLS handshake with {target.endpoint.dial_address}")
        base = ProbeReport(target.provider, target.url, timestamp, False, errors=errors)
        return replace(base, tls={k: (None if v is None else False) for k, v in tls.items()},
                       ip={"v4": False, "v6": None if not options.ipv6 else False})
    http = _guard(errors, "http", lambda: probe_http_versions(target, options, errors),
                  {"h1_1": False, "h2": False})
    ip = _guard(errors, "ip", lambda: probe_ip_versions(target, options, errors),
                {"v4": False, "v6": None if not options.ipv6 else False})
    methods = _guard(errors, "methods", lambda: probe_methods(target, options, errors),
                     MethodResults({"get": False, "post": False, "json": False}, False, None))
    issuer, lets_encrypt = _guard(errors, "certificate", lambda: inspect_certificate(target, options),
                                  (None, False))
    items, header_bytes, header_version = (), 0, None
    if methods.get_response is not None:
        items, header_bytes = headers_of(methods.get_response)
        header_version = methods.get_response.http_version
    return ProbeReport(
        provider=target.provider,
        url=target.url,
        timestamp=timestamp,
        reachable=True,
        http=http,
        tls=tls,
        ip=ip,
        methods=methods.methods,
        rfc8484_content_type_ok=methods.rfc8484_content_type_ok,
        cert_issuer=issuer,
        lets_encrypt=lets_encrypt,
        response_header_items=items,
        response_header_bytes=header_bytes,
        header_http_version=header_version,
        errors=errors,
    )


def probe_all(targets: Iterable[ProbeTarget], options: ProbeOptions = ProbeOptions(),
              parallel: int = 4, probe: Callable[[ProbeTarget, ProbeOptions], ProbeReport] = probe_target
              ) -> list[ProbeReport]:
    """Probe targets with at most ``parallel`` in flight; results keep input order."""
    targets = list(targets)
    if parallel < 1:
        raise ValueError("parallel must be >= 1")
    with ThreadPoolExecutor(max_workers=min(parallel, max(len(targets), 1))) as pool:
        return list(pool.map(lambda t: probe(t, options), targets))
