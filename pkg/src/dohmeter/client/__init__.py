from .doh import DohSession, JsonAnswer, doh_get, doh_json, doh_post
from .errors import (
    HttpError,
    IdMismatch,
    JsonParseError,
    MalformedResponse,
    NetworkError,
    QueryError,
    QueryTimeout,
    QueryTooLarge,
    TlsError,
    UnsupportedContentType,
)
from .http import ClientOptions, HttpConnection, HttpResponse
from .outcome import (
    Answer,
    DohEndpoint,
    HttpPreference,
    QueryOutcome,
    ResolutionMethod,
    Timing,
)
from .padding import apply_edns_padding
from .plain import parse_server, query_plain_tcp, query_plain_udp
