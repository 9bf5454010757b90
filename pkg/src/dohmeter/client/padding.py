"""EDNS(0) padding (RFC 7830 option, RFC 8467 block-length policy).

Boundary rule: the OPT record and the padding option header count toward
the padded size, so the result is the smallest multiple of ``block`` that is
at least ``len(query) + overhead``, where overhead is 15 bytes when a new
OPT record is added (11-byte OPT RR + 4-byte option header) and 4 bytes
when an existing OPT record gains the option. A 128-byte query padded with
block=128 therefore becomes 256 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import replace

from ..codec import (
    MAX_MESSAGE_SIZE,
    OPT,
    DnsMessage,
    DnsResourceRecord,
    EncodingOverflow,
    Name,
    encoded_length,
)

PADDING_OPTION = 12
OPT_RR_OVERHEAD = 11  # root name, type, class, ttl, rdlength
OPTION_HEADER = 4
DEFAULT_QUERY_BLOCK = 128
DEFAULT_UDP_SIZE = 1232


def _options(rdata: bytes) -> list[tuple[int, bytes]]:
    out = []
    pos = 0
    while pos + 4 <= len(rdata):
        code, length = struct.unpack_from("!HH", rdata, pos)
        out.append((code, rdata[pos + 4 : pos + 4 + length]))
        pos += 4 + length
    return out


def padded_length(unpadded: int, block: int, has_opt: bool = False) -> int:
    overhead = OPTION_HEADER if has_opt else OPT_RR_OVERHEAD + OPTION_HEADER
    minimum = unpadded + overhead
    return -(-minimum // block) * block


def apply_edns_padding(q: DnsMessage, block: int = DEFAULT_QUERY_BLOCK) -> DnsMessage:
    if block < 1:
        raise ValueError("block must be >= 1")
    current = encoded_length(q)
    opt_index = next((i for i, rr in enumerate(q.additional) if rr.rtype == OPT), None)
    if opt_index is not None and any(code == PADDING_OPTION for code, _ in _options(q.additional[opt_index].rdata)):
        raise ValueError("query already carries EDNS padding")
    target = padded_length(current, block, has_opt=opt_index is not None)
    if target > MAX_MESSAGE_SIZE:
        raise EncodingOverflow(f"padding to {target} bytes exceeds 65535")
    overhead = OPTION_HEADER if opt_index is not None else OPT_RR_OVERHEAD + OPTION_HEADER
    pad = target - current - overhead
    option = struct.pack("!HH", PADDING_OPTION, pad) + bytes(pad)
    additional = list(q.additional)
    if opt_index is None:
        additional.append(DnsResourceRecord(Name(()), OPT, DEFAULT_UDP_SIZE, 0, option))
    else:
        opt = additional[opt_index]
        additional[opt_index] = replace(opt, rdata=opt.rdata + option)
    return replace(q, additional=tuple(additional))
