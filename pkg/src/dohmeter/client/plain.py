"""Classic DNS over UDP and TCP port 53."""

from __future__ import annotations

import ipaddress
import socket
import time

from ..codec import (
    MAX_UDP_PAYLOAD,
    DecodeError,
    DnsMessage,
    FrameDecoder,
    decode_message,
    encode_message,
    tcp_frame,
)
from .errors import IdMismatch, MalformedResponse, NetworkError, QueryTimeout, QueryTooLarge
from .outcome import QueryOutcome, ResolutionMethod, Timing, answers_from_message

Server = tuple[str, int]


def parse_server(text: str, default_port: int = 53) -> Server:
    """Parse "ip", "ip:port" or "[v6]:port"."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = int(rest[1:]) if rest.startswith(":") else default_port
    elif text.count(":") == 1:
        host, port_text = text.split(":")
        port = int(port_text)
    else:
        host, port = text, default_port
    ipaddress.ip_address(host)
    if not 1 <= port <= 65535:
        raise ValueError(f"port out of range: {port}")
    return host, port


def _family(host: str) -> int:
    return socket.AF_INET6 if ipaddress.ip_address(host).version == 6 else socket.AF_INET


def _check_response(query: DnsMessage, wire: bytes) -> DnsMessage:
    try:
        response = decode_message(wire)
    except DecodeError as exc:
        raise MalformedResponse(f"undecodable response: {exc}") from exc
    if response.id != query.id:
        raise IdMismatch(f"response id {response.id} != query id {query.id}")
    if not response.header.qr:
        raise MalformedResponse("response does not have QR set")
    return response


def _outcome(method, query, response, start, first, sent, received, retried=False):
    q = query.question
    return QueryOutcome(
        method=method,
        qname=str(q.qname) if q else ".",
        qtype=q.qtype if q else 0,
        rcode=response.rcode,
        answers=answers_from_message(response),
        timing=Timing(start, first, time.monotonic()),
        app_bytes_sent=sent,
        app_bytes_received=received,
        truncated_retried=retried,
    )


def query_plain_udp(server: Server, q: DnsMessage, timeout: float = 5.0,
                    *, retry_tcp: bool = True) -> QueryOutcome:
    """Send ``q`` over UDP; fall back to TCP when the answer is truncated."""
    wire = encode_message(q)
    if len(wire) > MAX_UDP_PAYLOAD:
        raise QueryTooLarge(f"{len(wire)}-byte query exceeds the 512-byte UDP limit")
    start = time.monotonic()
    deadline = start + timeout
    with socket.socket(_family(server[0]), socket.SOCK_DGRAM) as sock:
        try:
            sock.connect(server)
            sock.send(wire)
            sock.settimeout(max(deadline - time.monotonic(), 0.001))
            data = sock.recv(65535)
        except socket.timeout:
            raise QueryTimeout(f"no UDP response from {server[0]}:{server[1]} within {timeout}s") from None
        except OSError as exc:
            raise NetworkError(f"UDP exchange with {server[0]}:{server[1]} failed: {exc}") from exc
    first = time.monotonic()
    response = _check_response(q, data)
    if response.header.tc and retry_tcp:
        remaining = max(deadline - time.monotonic(), 0.001)
        via_tcp = query_plain_tcp(server, q, remaining)
        return QueryOutcome(
            method=ResolutionMethod.PLAIN_UDP,
            qname=via_tcp.qname,
            qtype=via_tcp.qtype,
            rcode=via_tcp.rcode,
            answers=via_tcp.answers,
            timing=Timing(start, first, via_tcp.timing.end),
            app_bytes_sent=len(wire) + via_tcp.app_bytes_sent,
            app_bytes_received=len(data) + via_tcp.app_bytes_received,
            truncated_retried=True,
        )
    return _outcome(ResolutionMethod.PLAIN_UDP, q, response, start, first, len(wire), len(data))


def query_plain_tcp(server: Server, q: DnsMessage, timeout: float = 5.0) -> QueryOutcome:
    framed = tcp_frame(encode_message(q))
    start = time.monotonic()
    decoder = FrameDecoder()
    received = 0
    first = None
    try:
        with socket.create_connection(server, timeout=timeout) as sock:
            sock.settimeout(max(start + timeout - time.monotonic(), 0.001))
            sock.sendall(framed)
            messages: list[bytes] = []
            while not messages:
                chunk = sock.recv(65536)
                if not chunk:
                    raise MalformedResponse("connection closed before a complete response")
                if first is None:
                    first = time.monotonic()
                received += len(chunk)
                messages = decoder.feed(chunk)
    except socket.timeout:
        raise QueryTimeout(f"no TCP response from {server[0]}:{server[1]} within {timeout}s") from None
    except OSError as exc:
        raise NetworkError(f"TCP exchange with {server[0]}:{server[1]} failed: {exc}") from exc
    response = _check_response(q, messages[0])
    return _outcome(ResolutionMethod.PLAIN_TCP, q, response, start, first, len(framed), received)
