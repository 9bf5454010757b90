"""DNS over HTTPS: RFC 8484 GET and POST plus the provider JSON API."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional
from urllib.parse import urlencode

from ..codec import (
    DecodeError,
    DnsMessage,
    base64url_encode_nopad,
    decode_message,
    encode_message,
    qtype_from_text,
)
from .errors import HttpError, JsonParseError, MalformedResponse, UnsupportedContentType
from .http import ClientOptions, HttpConnection, HttpResponse
from .outcome import (
    Answer,
    DohEndpoint,
    QueryOutcome,
    ResolutionMethod,
    Timing,
    answers_from_message,
)

DNS_MESSAGE = "application/dns-message"
DNS_JSON = "application/dns-json"
JSON_CONTENT_TYPES = (DNS_JSON, "application/json", "application/x-javascript")


def get_target(endpoint: DohEndpoint, wire: bytes) -> str:
    sep = "&" if "?" in endpoint.path else "?"
    return f"{endpoint.path}{sep}dns={base64url_encode_nopad(wire)}"


def json_target(endpoint: DohEndpoint, name: str, qtype: str | int) -> str:
    if isinstance(qtype, str) and not qtype.strip().isdigit():
        qtype_from_text(qtype)  # validates the mnemonic
        type_param = qtype.strip().upper()
    else:
        type_param = str(qtype_from_text(qtype))
    sep = "&" if "?" in endpoint.path else "?"
    return f"{endpoint.path}{sep}{urlencode({'name': name, 'type': type_param})}"


def wire_request(method: ResolutionMethod, endpoint: DohEndpoint, q: DnsMessage):
    """(http method, target, headers, body) for a wire-format DoH exchange."""
    wire = encode_message(q)
    if method is ResolutionMethod.DOH_GET:
        return "GET", get_target(endpoint, wire), [("Accept", DNS_MESSAGE)], None
    if method is ResolutionMethod.DOH_POST:
        return "POST", endpoint.path, [("Accept", DNS_MESSAGE), ("Content-Type", DNS_MESSAGE)], wire
    raise ValueError(f"{method} is not a wire-format DoH method")


@dataclass(frozen=True)
class JsonAnswer:
    status: int
    tc: bool
    rd: bool
    ra: bool
    ad: bool
    cd: bool
    question: tuple[dict, ...] = ()
    answer: tuple[dict, ...] = ()

    @classmethod
    def parse(cls, body: bytes) -> "JsonAnswer":
        try:
            data = json.loads(body)
        except (ValueError, UnicodeDecodeError) as exc:
            raise JsonParseError(f"invalid JSON body: {exc}") from exc
        if not isinstance(data, dict) or not isinstance(data.get("Status"), int):
            raise JsonParseError("JSON answer lacks an integer 'Status' field")
        try:
            question = tuple({"name": q["name"], "type": int(q["type"])} for q in data.get("Question", []))
            answer = tuple(
                {"name": a["name"], "type": int(a["type"]), "TTL": int(a["TTL"]), "data": str(a["data"])}
                for a in data.get("Answer", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise JsonParseError(f"JSON answer has malformed records: {exc!r}") from exc
        flags = {key: data.get(key.upper(), False) for key in ("tc", "rd", "ra", "ad", "cd")}
        if not all(isinstance(v, bool) for v in flags.values()):
            raise JsonParseError("JSON flag fields must be booleans")
        return cls(status=data["Status"], question=question, answer=answer, **flags)

    @property
    def answers(self) -> tuple[Answer, ...]:
        return tuple(Answer(a["name"], a["type"], a["TTL"], a["data"]) for a in self.answer)


def check_wire_response(response: HttpResponse, q: DnsMessage, *, strict_content_type: bool = True) -> DnsMessage:
    if not 200 <= response.status < 300:
        raise HttpError(response.status)
    if strict_content_type and response.content_type != DNS_MESSAGE:
        raise UnsupportedContentType(response.content_type)
    try:
        message = decode_message(response.body)
    except DecodeError as exc:
        raise MalformedResponse(f"undecodable DNS payload: {exc}") from exc
    if not message.header.qr:
        raise MalformedResponse("DNS payload is not a response")
    if message.id != q.id:
        raise MalformedResponse(f"response id {message.id} != query id {q.id}")
    return message


def _outcome(method, qname, qtype, rcode, answers, response: HttpResponse) -> QueryOutcome:
    return QueryOutcome(
        method=method,
        qname=qname,
        qtype=qtype,
        rcode=rcode,
        answers=answers,
        timing=Timing(response.start, response.first_byte, response.end),
        app_bytes_sent=response.bytes_sent,
        app_bytes_received=response.bytes_received,
        http_status=response.status,
        http_version=response.http_version,
        response_headers=tuple(response.headers),
    )


class DohSession:
    """Resolver bound to one endpoint.

    In session mode (``reuse=True``) one TLS connection is kept open and
    reused; otherwise every query opens and closes its own connection, which
    is what single-query overhead measurements need. A session must not be
    shared between threads.
    """

    def __init__(self, endpoint: DohEndpoint, options: ClientOptions = ClientOptions(),
                 timeout: float = 5.0, reuse: bool = True):
        self.endpoint = endpoint
        self.options = options
        self.timeout = timeout
        self.reuse = reuse
        self._conn: Optional[HttpConnection] = None

    def _connection(self) -> HttpConnection:
        if self._conn is None or not self._conn.usable:
            self._conn = HttpConnection(self.endpoint, self.options, self.timeout)
        return self._conn

    def exchange(self, method: str, target: str, headers, body=None) -> HttpResponse:
        conn = self._connection()
        try:
            # Connection setup time belongs to the first exchange.
            response = conn.request(method, target, headers, body)
            if conn.connect_started is not None:
                response.start = conn.connect_started
                conn.connect_started = None
        except BaseException:
            conn.close()
            raise
        finally:
            if not self.reuse:
                conn.close()
        return response

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def __enter__(self) -> "DohSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def query(self, method: ResolutionMethod, q: DnsMessage, *,
              strict_content_type: bool = True) -> QueryOutcome:
        method = ResolutionMethod.parse(method)
        http_method, target, headers, body = wire_request(method, self.endpoint, q)
        response = self.exchange(http_method, target, headers, body)
        message = check_wire_response(response, q, strict_content_type=strict_content_type)
        question = q.question
        return _outcome(method, str(question.qname), question.qtype, message.rcode,
                        answers_from_message(message), response)

    def get(self, q: DnsMessage, **kwargs) -> QueryOutcome:
        return self.query(ResolutionMethod.DOH_GET, q, **kwargs)

    def post(self, q: DnsMessage, **kwargs) -> QueryOutcome:
        return self.query(ResolutionMethod.DOH_POST, q, **kwargs)

    def json(self, name: str, qtype: str | int = "A") -> QueryOutcome:
        target = json_target(self.endpoint, name, qtype)
        response = self.exchange("GET", target, [("Accept", DNS_JSON)])
        if not 200 <= response.status < 300:
            raise HttpError(response.status)
        if response.content_type not in JSON_CONTENT_TYPES:
            raise UnsupportedContentType(response.content_type)
        parsed = JsonAnswer.parse(response.body)
        qname = name if name.endswith(".") else name + "."
        return _outcome(ResolutionMethod.DOH_JSON, qname, qtype_from_text(qtype), parsed.status,
                        parsed.answers, response)


def doh_get(ep: DohEndpoint, q: DnsMessage, timeout: float = 5.0,
            options: ClientOptions = ClientOptions()) -> QueryOutcome:
    with DohSession(ep, options, timeout, reuse=False) as session:
        return session.get(q)


def doh_post(ep: DohEndpoint, q: DnsMessage, timeout: float = 5.0,
             options: ClientOptions = ClientOptions()) -> QueryOutcome:
    with DohSession(ep, options, timeout, reuse=False) as session:
        return session.post(q)


def doh_json(ep: DohEndpoint, name: str, qtype_name: str | int = "A", timeout: float = 5.0,
             options: ClientOptions = ClientOptions()) -> QueryOutcome:
    with DohSession(ep, options, timeout, reuse=False) as session:
        return session.json(name, qtype_name)
