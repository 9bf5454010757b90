"""DNS wire format (RFC 1035) encoder/decoder and transport framing helpers.

The encoder always writes uncompressed names. The decoder follows compression
pointers anywhere in the message and rejects loops and out-of-range pointers.
Record data is kept opaque except for A/AAAA views; names embedded in the
rdata of the RFC 1035 well-known types (CNAME, NS, PTR, MX, SOA) are
decompressed on read so that a decoded message re-encodes correctly.
"""

from __future__ import annotations

import base64
import binascii
import ipaddress
import re
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

MAX_MESSAGE_SIZE = 65535
MAX_UDP_PAYLOAD = 512
MAX_LABEL_LENGTH = 63
MAX_NAME_LENGTH = 255

# RR types
A = 1
NS = 2
CNAME = 5
SOA = 6
PTR = 12
MX = 15
TXT = 16
AAAA = 28
SRV = 33
OPT = 41
HTTPS = 65
ANY = 255

CLASS_IN = 1

RCODE_NOERROR = 0
RCODE_FORMERR = 1
RCODE_SERVFAIL = 2
RCODE_NXDOMAIN = 3

QTYPE_BY_NAME = {
    "A": A,
    "NS": NS,
    "CNAME": CNAME,
    "SOA": SOA,
    "PTR": PTR,
    "MX": MX,
    "TXT": TXT,
    "AAAA": AAAA,
    "SRV": SRV,
    "OPT": OPT,
    "HTTPS": HTTPS,
    "ANY": ANY,
}
QTYPE_NAMES = {v: k for k, v in QTYPE_BY_NAME.items()}


class DnsError(ValueError):
    """Base class for codec errors."""


class InvalidDomain(DnsError):
    pass


class InvalidMessage(DnsError):
    """A constructed message violates a type invariant."""


class EncodingOverflow(DnsError):
    pass


class InvalidBase64(DnsError):
    pass


class DecodeError(DnsError):
    """Base class for errors raised while parsing wire data."""


class Truncated(DecodeError):
    pass


class MalformedName(DecodeError):
    pass


class CountMismatch(DecodeError):
    pass


class MalformedRecord(DecodeError):
    pass


class MalformedMessage(DecodeError):
    pass


class TrailingData(DecodeError):
    pass


def qtype_from_text(value: str | int) -> int:
    """Accept a mnemonic ("AAAA") or numeric ("28", "TYPE28", 28) type."""
    if isinstance(value, int):
        code = value
    else:
        text = value.strip().upper()
        if text in QTYPE_BY_NAME:
            return QTYPE_BY_NAME[text]
        if text.startswith("TYPE"):
            text = text[4:]
        if not text.isdigit():
            raise ValueError(f"unknown query type {value!r}")
        code = int(text)
    if not 0 <= code <= 0xFFFF:
        raise ValueError(f"query type out of range: {value!r}")
    return code


def qtype_to_text(code: int) -> str:
    return QTYPE_NAMES.get(code, f"TYPE{code}")


_PRINTABLE = frozenset(range(0x21, 0x7F)) - {ord("."), ord("\\")}


@dataclass(frozen=True, eq=False)
class Name:
    """Domain name as a tuple of raw labels; the root is the empty tuple.

    Comparison and hashing ignore ASCII case, while the original case is kept
    for encoding.
    """

    labels: tuple[bytes, ...] = ()

    def __post_init__(self) -> None:
        for label in self.labels:
            if not 1 <= len(label) <= MAX_LABEL_LENGTH:
                raise InvalidDomain(f"label length {len(label)} not in [1, 63]")
        if self.wire_length > MAX_NAME_LENGTH:
            raise InvalidDomain(f"name is {self.wire_length} bytes, limit is 255")

    @classmethod
    def from_text(cls, text: str) -> "Name":
        if not isinstance(text, str):
            raise InvalidDomain(f"expected str, got {type(text).__name__}")
        if not text.isascii():
            raise InvalidDomain(f"non-ASCII domain {text!r} (IDNA is not supported)")
        if text in (".", ""):
            return cls(())
        if text.endswith("."):
            text = text[:-1]
        labels = []
        for part in text.split("."):
            if not part:
                raise InvalidDomain(f"empty label in {text!r}")
            labels.append(part.encode("ascii"))
        return cls(tuple(labels))

    @property
    def wire_length(self) -> int:
        return sum(len(label) + 1 for label in self.labels) + 1

    def to_wire(self) -> bytes:
        out = bytearray()
        for label in self.labels:
            out.append(len(label))
            out += label
        out.append(0)
        return bytes(out)

    def _key(self) -> tuple[bytes, ...]:
        return tuple(label.lower() for label in self.labels)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, str):
            try:
                other = Name.from_text(other)
            except InvalidDomain:
                return False
        if not isinstance(other, Name):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def __str__(self) -> str:
        if not self.labels:
            return "."
        parts = []
        for label in self.labels:
            chars = []
            for b in label:
                if b in _PRINTABLE:
                    chars.append(chr(b))
                elif b in (ord("."), ord("\\")):
                    chars.append("\\" + chr(b))
                else:
                    chars.append(f"\\{b:03d}")
            parts.append("".join(chars))
        return ".".join(parts) + "."

    def __repr__(self) -> str:
        return f"Name({str(self)!r})"


def _as_name(value: Name | str) -> Name:
    return value if isinstance(value, Name) else Name.from_text(value)


@dataclass(frozen=True)
class DnsHeader:
    id: int = 0
    qr: bool = False
    opcode: int = 0
    aa: bool = False
    tc: bool = False
    rd: bool = False
    ra: bool = False
    z: bool = False
    ad: bool = False
    cd: bool = False
    rcode: int = 0
    qdcount: int = 0
    ancount: int = 0
    nscount: int = 0
    arcount: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.id <= 0xFFFF:
            raise InvalidMessage(f"id out of range: {self.id}")
        if not 0 <= self.opcode <= 0xF:
            raise InvalidMessage(f"opcode out of range: {self.opcode}")
        if not 0 <= self.rcode <= 0xF:
            raise InvalidMessage(f"rcode out of range: {self.rcode}")
        for name in ("qdcount", "ancount", "nscount", "arcount"):
            if not 0 <= getattr(self, name) <= 0xFFFF:
                raise InvalidMessage(f"{name} out of range")
        if self.tc and not self.qr:
            raise InvalidMessage("TC may only be set on responses")

    @property
    def flags(self) -> int:
        return (
            (self.qr << 15)
            | (self.opcode << 11)
            | (self.aa << 10)
            | (self.tc << 9)
            | (self.rd << 8)
            | (self.ra << 7)
            | (self.z << 6)
            | (self.ad << 5)
            | (self.cd << 4)
            | self.rcode
        )

    @classmethod
    def from_flags(cls, id: int, flags: int, counts: Sequence[int]) -> "DnsHeader":
        return cls(
            id=id,
            qr=bool(flags & 0x8000),
            opcode=(flags >> 11) & 0xF,
            aa=bool(flags & 0x0400),
            tc=bool(flags & 0x0200),
            rd=bool(flags & 0x0100),
            ra=bool(flags & 0x0080),
            z=bool(flags & 0x0040),
            ad=bool(flags & 0x0020),
            cd=bool(flags & 0x0010),
            rcode=flags & 0xF,
            qdcount=counts[0],
            ancount=counts[1],
            nscount=counts[2],
            arcount=counts[3],
        )


@dataclass(frozen=True)
class DnsQuestion:
    qname: Name
    qtype: int = A
    qclass: int = CLASS_IN

    def __post_init__(self) -> None:
        object.__setattr__(self, "qname", _as_name(self.qname))
        if not (0 <= self.qtype <= 0xFFFF and 0 <= self.qclass <= 0xFFFF):
            raise InvalidMessage("qtype/qclass must be 16-bit")


@dataclass(frozen=True)
class DnsResourceRecord:
    name: Name
    rtype: int
    rclass: int = CLASS_IN
    ttl: int = 0
    rdata: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "name", _as_name(self.name))
        object.__setattr__(self, "rdata", bytes(self.rdata))
        if not (0 <= self.rtype <= 0xFFFF and 0 <= self.rclass <= 0xFFFF):
            raise InvalidMessage("rtype/rclass must be 16-bit")
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise InvalidMessage("ttl must be 32-bit unsigned")
        if len(self.rdata) > 0xFFFF:
            raise InvalidMessage("rdata longer than 65535 bytes")
        if self.rclass == CLASS_IN:
            if self.rtype == A and len(self.rdata) != 4:
                raise InvalidMessage("A rdata must be 4 bytes")
            if self.rtype == AAAA and len(self.rdata) != 16:
                raise InvalidMessage("AAAA rdata must be 16 bytes")

    @property
    def address(self) -> ipaddress.IPv4Address | ipaddress.IPv6Address | None:
        if self.rtype == A and len(self.rdata) == 4:
            return ipaddress.IPv4Address(self.rdata)
        if self.rtype == AAAA and len(self.rdata) == 16:
            return ipaddress.IPv6Address(self.rdata)
        return None

    def rdata_text(self) -> str:
        """Presentation form for addresses and name-bearing types; hex otherwise."""
        addr = self.address
        if addr is not None:
            return str(addr)
        try:
            if self.rtype in (CNAME, NS, PTR):
                return str(_read_name(self.rdata, 0)[0])
            if self.rtype == TXT:
                return " ".join(
                    '"' + s.decode("ascii", "backslashreplace") + '"'
                    for s in _split_character_strings(self.rdata)
                )
        except DecodeError:
            pass
        return self.rdata.hex()

    @classmethod
    def a(cls, name: Name | str, address: str, ttl: int = 300) -> "DnsResourceRecord":
        return cls(name, A, CLASS_IN, ttl, ipaddress.IPv4Address(address).packed)

    @classmethod
    def aaaa(cls, name: Name | str, address: str, ttl: int = 300) -> "DnsResourceRecord":
        return cls(name, AAAA, CLASS_IN, ttl, ipaddress.IPv6Address(address).packed)

    @classmethod
    def txt(cls, name: Name | str, *strings: bytes, ttl: int = 300) -> "DnsResourceRecord":
        rdata = bytearray()
        for s in strings:
            for i in range(0, max(len(s), 1), 255):
                chunk = s[i : i + 255]
                rdata.append(len(chunk))
                rdata += chunk
        return cls(name, TXT, CLASS_IN, ttl, bytes(rdata))

    @classmethod
    def cname(cls, name: Name | str, target: Name | str, ttl: int = 300) -> "DnsResourceRecord":
        return cls(name, CNAME, CLASS_IN, ttl, _as_name(target).to_wire())


def _split_character_strings(rdata: bytes) -> list[bytes]:
    out = []
    pos = 0
    while pos < len(rdata):
        n = rdata[pos]
        if pos + 1 + n > len(rdata):
            raise Truncated("character-string overruns rdata")
        out.append(rdata[pos + 1 : pos + 1 + n])
        pos += 1 + n
    return out


@dataclass(frozen=True)
class DnsMessage:
    """A DNS message. Header counters are kept in sync with the sections."""

    header: DnsHeader = field(default_factory=DnsHeader)
    questions: tuple[DnsQuestion, ...] = ()
    answers: tuple[DnsResourceRecord, ...] = ()
    authority: tuple[DnsResourceRecord, ...] = ()
    additional: tuple[DnsResourceRecord, ...] = ()

    def __post_init__(self) -> None:
        for name in ("questions", "answers", "authority", "additional"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        header = replace(
            self.header,
            qdcount=len(self.questions),
            ancount=len(self.answers),
            nscount=len(self.authority),
            arcount=len(self.additional),
        )
        object.__setattr__(self, "header", header)

    @property
    def id(self) -> int:
        return self.header.id

    @property
    def rcode(self) -> int:
        return self.header.rcode

    @property
    def question(self) -> DnsQuestion | None:
        return self.questions[0] if self.questions else None

    def with_id(self, id: int) -> "DnsMessage":
        return replace(self, header=replace(self.header, id=id))

    def reply(self, *, rcode: int = RCODE_NOERROR, answers: Iterable[DnsResourceRecord] = (),
              ra: bool = True, tc: bool = False) -> "DnsMessage":
        """Build a response echoing this query's id, flags and question."""
        header = replace(self.header, qr=True, ra=ra, tc=tc, rcode=rcode, aa=False)
        return DnsMessage(header, self.questions, tuple(answers))


def make_query(domain: str, qtype: int | str = A, id: int = 0) -> DnsMessage:
    """Standard recursive query: one IN question, RD set."""
    qname = Name.from_text(domain)
    header = DnsHeader(id=id, qr=False, rd=True)
    return DnsMessage(header, (DnsQuestion(qname, qtype_from_text(qtype), CLASS_IN),))


def _encode_rr(rr: DnsResourceRecord, out: bytearray) -> None:
    out += rr.name.to_wire()
    out += struct.pack("!HHIH", rr.rtype, rr.rclass, rr.ttl, len(rr.rdata))
    out += rr.rdata


def encode_message(m: DnsMessage) -> bytes:
    h = m.header
    out = bytearray(
        struct.pack("!HHHHHH", h.id, h.flags, len(m.questions), len(m.answers),
                    len(m.authority), len(m.additional))
    )
    for q in m.questions:
        out += q.qname.to_wire()
        out += struct.pack("!HH", q.qtype, q.qclass)
        if len(out) > MAX_MESSAGE_SIZE:
            raise EncodingOverflow("message exceeds 65535 bytes")
    for section in (m.answers, m.authority, m.additional):
        for rr in section:
            _encode_rr(rr, out)
            if len(out) > MAX_MESSAGE_SIZE:
                raise EncodingOverflow("message exceeds 65535 bytes")
    return bytes(out)


def encoded_length(m: DnsMessage) -> int:
    """Size of encode_message(m) without building the buffer."""
    size = 12
    for q in m.questions:
        size += q.qname.wire_length + 4
    for section in (m.answers, m.authority, m.additional):
        for rr in section:
            size += rr.name.wire_length + 10 + len(rr.rdata)
    return size


def _read_name(buf: bytes, offset: int) -> tuple[Name, int]:
    """Read a possibly-compressed name; return it and the offset after it."""
    labels: list[bytes] = []
    length = 1
    end: int | None = None
    seen: set[int] = set()
    pos = offset
    while True:
        if pos >= len(buf):
            raise Truncated(f"name runs past end of buffer at offset {pos}")
        n = buf[pos]
        kind = n & 0xC0
        if kind == 0xC0:
            if pos + 1 >= len(buf):
                raise Truncated("compression pointer cut short")
            target = ((n & 0x3F) << 8) | buf[pos + 1]
            if end is None:
                end = pos + 2
            if target in seen or target == pos:
                raise MalformedName(f"compression pointer loop at offset {pos}")
            if target >= len(buf):
                raise MalformedName(f"compression pointer {target} beyond buffer")
            seen.add(pos)
            seen.add(target)
            pos = target
        elif kind:
            raise MalformedName(f"unsupported label type 0x{n:02x} at offset {pos}")
        elif n == 0:
            if end is None:
                end = pos + 1
            return Name(tuple(labels)), end
        else:
            if pos + 1 + n > len(buf):
                raise Truncated("label runs past end of buffer")
            length += n + 1
            if length > MAX_NAME_LENGTH:
                raise MalformedName("name longer than 255 bytes")
            labels.append(bytes(buf[pos + 1 : pos + 1 + n]))
            pos += 1 + n


def _expand_rdata(buf: bytes, rtype: int, start: int, end: int) -> bytes:
    """Rewrite compressed names inside well-known rdata as uncompressed."""
    if rtype in (CNAME, NS, PTR):
        name, pos = _read_name(buf[:end], start)
        if pos != end:
            raise MalformedRecord("trailing bytes after name in rdata")
        return name.to_wire()
    if rtype == MX:
        if end - start < 3:
            raise MalformedRecord("MX rdata too short")
        name, pos = _read_name(buf[:end], start + 2)
        if pos != end:
            raise MalformedRecord("trailing bytes in MX rdata")
        return buf[start : start + 2] + name.to_wire()
    if rtype == SOA:
        mname, pos = _read_name(buf[:end], start)
        rname, pos = _read_name(buf[:end], pos)
        if end - pos != 20:
            raise MalformedRecord("SOA rdata has wrong fixed-field length")
        return mname.to_wire() + rname.to_wire() + buf[pos:end]
    return bytes(buf[start:end])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str) -> tuple[int, ...]:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise Truncated(f"need {size} bytes at offset {self.pos}")
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return values

    def name(self) -> Name:
        name, self.pos = _read_name(self.buf, self.pos)
        return name

    def at_end(self) -> bool:
        return self.pos >= len(self.buf)


def _read_rr(r: _Reader) -> DnsResourceRecord:
    name = r.name()
    rtype, rclass, ttl, rdlength = r.take("!HHIH")
    start = r.pos
    end = start + rdlength
    if end > len(r.buf):
        raise Truncated(f"rdata of {rdlength} bytes runs past end of buffer")
    rdata = _expand_rdata(r.buf, rtype, start, end) if rclass == CLASS_IN else r.buf[start:end]
    r.pos = end
    try:
        return DnsResourceRecord(name, rtype, rclass, ttl, rdata)
    except InvalidMessage as exc:
        raise MalformedRecord(str(exc)) from None


def decode_message(data: bytes) -> DnsMessage:
    """Parse wire bytes. Every failure surfaces as a DecodeError subclass."""
    buf = bytes(data)
    r = _Reader(buf)
    ident, flags, qd, an, ns, ar = r.take("!HHHHHH")
    try:
        header = DnsHeader.from_flags(ident, flags, (qd, an, ns, ar))
    except InvalidMessage as exc:
        raise MalformedMessage(str(exc)) from None

    def need_more(section: str, expected: int, got: int) -> None:
        if r.at_end():
            raise CountMismatch(f"{section}: header says {expected}, found {got}")

    questions = []
    for i in range(qd):
        need_more("question", qd, i)
        qname = r.name()
        qtype, qclass = r.take("!HH")
        questions.append(DnsQuestion(qname, qtype, qclass))
    sections: list[list[DnsResourceRecord]] = []
    for label, count in (("answer", an), ("authority", ns), ("additional", ar)):
        records = []
        for i in range(count):
            need_more(label, count, i)
            records.append(_read_rr(r))
        sections.append(records)
    if not r.at_end():
        raise TrailingData(f"{len(buf) - r.pos} bytes after last section")
    return DnsMessage(header, tuple(questions), *map(tuple, sections))


_B64URL = re.compile(r"[A-Za-z0-9_-]*")


def base64url_encode_nopad(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def base64url_decode_nopad(text: str) -> bytes:
    if not _B64URL.fullmatch(text):
        raise InvalidBase64("characters outside the base64url alphabet (or padding)")
    if len(text) % 4 == 1:
        raise InvalidBase64("impossible length for base64 data")
    try:
        return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except binascii.Error as exc:
        raise InvalidBase64(str(exc)) from None


def tcp_frame(msg: bytes) -> bytes:
    if len(msg) > MAX_MESSAGE_SIZE:
        raise EncodingOverflow(f"{len(msg)}-byte message cannot be length-prefixed")
    return struct.pack("!H", len(msg)) + msg


class FrameDecoder:
    """Incremental splitter for a TCP DNS byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= 2:
            size = (self._buf[0] << 8) | self._buf[1]
            if len(self._buf) < 2 + size:
                break
            out.append(bytes(self._buf[2 : 2 + size]))
            del self._buf[: 2 + size]
        return out

    @property
    def remainder(self) -> bytes:
        return bytes(self._buf)


def tcp_unframe(stream: bytes) -> list[bytes]:
    """Split concatenated length-prefixed messages.

    An incomplete trailing frame raises Truncated; the complete messages and
    the leftover bytes are attached to the exception as ``messages`` and
    ``remainder``.
    """
    decoder = FrameDecoder()
    messages = decoder.feed(stream)
    if decoder.remainder:
        exc = Truncated(f"{len(decoder.remainder)} bytes of incomplete frame")
        exc.messages = messages  # type: ignore[attr-defined]
        exc.remainder = decoder.remainder  # type: ignore[attr-defined]
        raise exc
    return messages
