class QueryError(Exception):
    """Base class for resolution failures."""


class QueryTimeout(QueryError, TimeoutError):
    pass


class NetworkError(QueryError):
    pass


class TlsError(NetworkError):
    pass


class MalformedResponse(QueryError):
    pass


class IdMismatch(MalformedResponse):
    pass


class QueryTooLarge(QueryError):
    pass


class HttpError(QueryError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"HTTP {status}" + (f": {message}" if message else ""))
        self.status = status


class UnsupportedContentType(QueryError):
    def __init__(self, content_type: str | None):
        super().__init__(f"unexpected content-type {content_type!r}")
        self.content_type = content_type


class JsonParseError(MalformedResponse):
    pass
