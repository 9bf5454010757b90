"""Minimal HTTPS transport with HTTP/1.1 and HTTP/2 and byte accounting.

The stdlib and httpx clients hide the bytes that actually cross the TLS
layer; measuring application overhead needs the raw request and response
sizes and the raw response header block, so requests are written by hand.
"""

from __future__ import annotations

import socket
import ssl
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import h2.config
import h2.connection
import h2.events
import h2.exceptions

from .errors import MalformedResponse, NetworkError, QueryTimeout, TlsError
from .outcome import DohEndpoint

USER_AGENT = "dohmeter/0.1"

TLS_VERSIONS = {
    "1.0": ssl.TLSVersion.TLSv1,
    "1.1": ssl.TLSVersion.TLSv1_1,
    "1.2": ssl.TLSVersion.TLSv1_2,
    "1.3": ssl.TLSVersion.TLSv1_3,
}


def parse_tls_version(text: str) -> ssl.TLSVersion:
    key = text.strip().lower().removeprefix("tlsv").removeprefix("tls")
    try:
        return TLS_VERSIONS[key]
    except KeyError:
        raise ValueError(f"unknown TLS version {text!r}") from None


def set_tls_window(ctx: ssl.SSLContext, minimum: ssl.TLSVersion,
                   maximum: Optional[ssl.TLSVersion] = None) -> None:
    """Apply a TLS version window. Legacy versions are requested on purpose
    (capability probing), so Python's deprecation warning is silenced."""
    if minimum < ssl.TLSVersion.TLSv1_2:
        # OpenSSL 3 refuses TLS < 1.2 at the default security level.
        ctx.set_ciphers("DEFAULT:@SECLEVEL=0")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        ctx.minimum_version = minimum
        if maximum is not None:
            ctx.maximum_version = maximum


@dataclass(frozen=True)
class ClientOptions:
    """TLS and HTTP knobs shared by every DoH request.

    ``alpn`` overrides the endpoint's HTTP preference; the prober uses it to
    offer exactly one protocol.
    """

    verify: bool = True
    cafile: Optional[str] = None
    min_tls: ssl.TLSVersion = ssl.TLSVersion.TLSv1_2
    max_tls: Optional[ssl.TLSVersion] = None
    alpn: Optional[Sequence[str]] = None
    user_agent: str = USER_AGENT

    def ssl_context(self, alpn: Sequence[str]) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        if self.verify:
            if self.cafile:
                ctx.load_verify_locations(self.cafile)
            else:
                ctx.load_default_certs()
        else:
            ctx.check_hostname = False
            ctx.verify_mode = ssl.CERT_NONE
        set_tls_window(ctx, self.min_tls, self.max_tls)
        if alpn:
            ctx.set_alpn_protocols(list(alpn))
        return ctx


@dataclass
class HttpResponse:
    status: int
    headers: list[tuple[str, str]]
    body: bytes
    http_version: str
    header_bytes: int
    bytes_sent: int = 0
    bytes_received: int = 0
    start: float = 0.0
    first_byte: float = 0.0
    end: float = 0.0

    def header(self, name: str) -> Optional[str]:
        name = name.lower()
        for key, value in self.headers:
            if key == name:
                return value
        return None

    @property
    def content_type(self) -> Optional[str]:
        value = self.header("content-type")
        return value.split(";")[0].strip().lower() if value is not None else None


def h2_header_list_size(headers: Sequence[tuple[str, str]]) -> int:
    """Decompressed header list size: name + value + 32 octets per field."""
    return sum(len(n.encode()) + len(v.encode()) + 32 for n, v in headers)


@dataclass
class _Counters:
    sent: int = 0
    received: int = 0
    first_byte: Optional[float] = None


class HttpConnection:
    """One TLS connection speaking HTTP/1.1 or HTTP/2 (chosen by ALPN).

    Bytes written before the first request (HTTP/2 preface and settings) are
    charged to the first exchange.
    """

    def __init__(self, endpoint: DohEndpoint, options: ClientOptions = ClientOptions(),
                 timeout: float = 5.0):
        self.endpoint = endpoint
        self.options = options
        self.timeout = timeout
        self._counters = _Counters()
        self._buffer = bytearray()
        self._closed = False
        alpn = list(options.alpn) if options.alpn is not None else endpoint.preferred_http.alpn
        self.connect_started = time.monotonic()
        try:
            raw = socket.create_connection(endpoint.dial_address, timeout=timeout)
            raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except socket.timeout:
            raise QueryTimeout(f"connect to {endpoint.dial_address} timed out") from None
        except OSError as exc:
            raise NetworkError(f"connect to {endpoint.dial_address} failed: {exc}") from exc
        try:
            ctx = options.ssl_context(alpn)
            self.sock = ctx.wrap_socket(raw, server_hostname=endpoint.host)
        except socket.timeout:
            raw.close()
            raise QueryTimeout("TLS handshake timed out") from None
        except (ssl.SSLError, ssl.CertificateError) as exc:
            raw.close()
            raise TlsError(f"TLS handshake with {endpoint.host} failed: {exc}") from exc
        except OSError as exc:
            raw.close()
            raise NetworkError(f"TLS handshake with {endpoint.host} failed: {exc}") from exc
        self.alpn_protocol = self.sock.selected_alpn_protocol()
        self.tls_version = self.sock.version()
        self.peer_certificate = self.sock.getpeercert(binary_form=True)
        self.http2 = self.alpn_protocol == "h2"
        self._h2: Optional[h2.connection.H2Connection] = None
        if self.http2:
            config = h2.config.H2Configuration(client_side=True, header_encoding="utf-8")
            self._h2 = h2.connection.H2Connection(config=config)
            self._h2.initiate_connection()
            self._flush()

    @property
    def http_version(self) -> str:
        return "HTTP/2" if self.http2 else "HTTP/1.1"

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self._h2 is not None:
                self._h2.close_connection()
                self._flush()
        except Exception:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "HttpConnection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def usable(self) -> bool:
        return not self._closed

    def _send(self, data: bytes) -> None:
        if not data:
            return
        try:
            self.sock.sendall(data)
        except socket.timeout:
            raise QueryTimeout("send timed out") from None
        except OSError as exc:
            self._closed = True
            raise NetworkError(f"send failed: {exc}") from exc
        self._counters.sent += len(data)

    def _recv(self) -> bytes:
        try:
            data = self.sock.recv(65536)
        except socket.timeout:
            raise QueryTimeout("response timed out") from None
        except OSError as exc:
            self._closed = True
            raise NetworkError(f"receive failed: {exc}") from exc
        if data and self._counters.first_byte is None:
            self._counters.first_byte = time.monotonic()
        self._counters.received += len(data)
        return data

    def _flush(self) -> None:
        self._send(self._h2.data_to_send())

    def request(self, method: str, target: str, headers: Sequence[tuple[str, str]] = (),
                body: Optional[bytes] = None) -> HttpResponse:
        if self._closed:
            raise NetworkError("connection is closed")
        start = time.monotonic()
        self.sock.settimeout(self.timeout)
        counters = self._counters
        if self.http2:
            response = self._request_h2(method, target, headers, body)
        else:
            response = self._request_h1(method, target, headers, body)
        response.bytes_sent = counters.sent
        response.bytes_received = counters.received
        response.start = start
        response.end = time.monotonic()
        response.first_byte = min(max(counters.first_byte or response.end, start), response.end)
        self._counters = _Counters()
        return response

    # HTTP/1.1

    def _request_h1(self, method, target, headers, body) -> HttpResponse:
        lines = [f"{method} {target} HTTP/1.1", f"Host: {self.endpoint.authority}",
                 f"User-Agent: {self.options.user_agent}"]
        lines += [f"{name}: {value}" for name, value in headers]
        if body is not None:
            lines.append(f"Content-Length: {len(body)}")
        request = ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + (body or b"")
        self._send(request)

        head = self._read_until(b"\r\n\r\n")
        try:
            text = head.decode("latin-1")
            status_line, *header_lines = text[:-4].split("\r\n")
            version, status_text, *_ = status_line.split(" ", 2)
            status = int(status_text)
        except (ValueError, UnicodeDecodeError):
            self._closed = True
            raise MalformedResponse(f"bad HTTP/1.1 status line: {head[:80]!r}") from None
        if not version.startswith("HTTP/1."):
            self._closed = True
            raise MalformedResponse(f"unexpected protocol {version!r}")
        parsed = []
        for line in header_lines:
            name, sep, value = line.partition(":")
            if not sep:
                raise MalformedResponse(f"bad header line {line!r}")
            parsed.append((name.strip().lower(), value.strip()))
        response = HttpResponse(status, parsed, b"", "HTTP/1.1", header_bytes=len(head))
        response.body = self._read_h1_body(response, method)
        if (response.header("connection") or "").lower() == "close":
            self.close()
        return response

    def _read_until(self, marker: bytes) -> bytes:
        while True:
            idx = self._buffer.find(marker)
            if idx >= 0:
                out = bytes(self._buffer[: idx + len(marker)])
                del self._buffer[: idx + len(marker)]
                return out
            if len(self._buffer) > 1 << 20:
                raise MalformedResponse("header block too large")
            chunk = self._recv()
            if not chunk:
                self._closed = True
                raise MalformedResponse("connection closed mid-response")
            self._buffer += chunk

    def _read_exact(self, n: int) -> bytes:
        while len(self._buffer) < n:
            chunk = self._recv()
            if not chunk:
                self._closed = True
                raise MalformedResponse("connection closed mid-body")
            self._buffer += chunk
        out = bytes(self._buffer[:n])
        del self._buffer[:n]
        return out

    def _read_h1_body(self, response: HttpResponse, method: str) -> bytes:
        if method == "HEAD" or response.status in (204, 304) or 100 <= response.status < 200:
            return b""
        if "chunked" in (response.header("transfer-encoding") or "").lower():
            body = bytearray()
            while True:
                size_line = self._read_until(b"\r\n")
                try:
                    size = int(size_line.split(b";")[0].strip(), 16)
                except ValueError:
                    raise MalformedResponse(f"bad chunk size {size_line!r}") from None
                if size == 0:
                    while self._read_until(b"\r\n") != b"\r\n":
                        pass
                    return bytes(body)
                body += self._read_exact(size)
                self._read_exact(2)
        length = response.header("content-length")
        if length is not None:
            try:
                return self._read_exact(int(length))
            except ValueError:
                raise MalformedResponse(f"bad content-length {length!r}") from None
        body = bytearray(self._buffer)
        self._buffer.clear()
        while chunk := self._recv():
            body += chunk
        self._closed = True
        return bytes(body)

    # HTTP/2

    def _request_h2(self, method, target, headers, body) -> HttpResponse:
        conn = self._h2
        stream_id = conn.get_next_available_stream_id()
        request_headers = [
            (":method", method),
            (":scheme", "https"),
            (":authority", self.endpoint.authority),
            (":path", target),
            ("user-agent", self.options.user_agent),
        ]
        request_headers += [(name.lower(), value) for name, value in headers]
        if body is not None:
            request_headers.append(("content-length", str(len(body))))
        try:
            conn.send_headers(stream_id, request_headers, end_stream=body is None)
            self._flush()
            if body is not None:
                conn.send_data(stream_id, body, end_stream=True)
                self._flush()
        except h2.exceptions.ProtocolError as exc:
            self._closed = True
            raise NetworkError(f"HTTP/2 protocol error: {exc}") from exc

        status = None
        response_headers: list[tuple[str, str]] = []
        body_parts = bytearray()
        while True:
            data = self._recv()
            if not data:
                self._closed = True
                raise MalformedResponse("connection closed mid-response")
            try:
                events = conn.receive_data(data)
            except h2.exceptions.ProtocolError as exc:
                self._closed = True
                raise MalformedResponse(f"HTTP/2 protocol error: {exc}") from exc
            done = False
            for event in events:
                if isinstance(event, h2.events.ResponseReceived) and event.stream_id == stream_id:
                    response_headers = [(str(n), str(v)) for n, v in event.headers]
                    status = int(dict(response_headers)[":status"])
                elif isinstance(event, h2.events.DataReceived) and event.stream_id == stream_id:
                    body_parts += event.data
                    conn.acknowledge_received_data(event.flow_controlled_length, stream_id)
                elif isinstance(event, h2.events.StreamEnded) and event.stream_id == stream_id:
                    done = True
                elif isinstance(event, h2.events.StreamReset) and event.stream_id == stream_id:
                    raise MalformedResponse(f"stream reset by server (code {event.error_code})")
                elif isinstance(event, h2.events.ConnectionTerminated):
                    self._closed = True
                    if not done:
                        raise MalformedResponse(f"connection terminated (code {event.error_code})")
            self._flush()
            if done:
                break
        if status is None:
            raise MalformedResponse("stream ended without response headers")
        return HttpResponse(
            status=status,
            headers=[(n, v) for n, v in response_headers if not n.startswith(":")],
            body=bytes(body_parts),
            http_version="HTTP/2",
            header_bytes=h2_header_list_size(response_headers),
        )
