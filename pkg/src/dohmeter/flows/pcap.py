"""Offline pcap/pcapng reader and a minimal pcap writer.

Supported link types: Ethernet (with one optional 802.1Q tag) and raw IP.
Anything that is not TCP or UDP over IPv4/IPv6 is skipped and counted by
reason in ``CaptureReader.skipped``.
"""

from __future__ import annotations

import ipaddress
import struct
from collections import Counter
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional

from .packets import MTU, PROTOCOL_NUMBERS, TCP, UDP, PacketRecord

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
SUPPORTED_LINKTYPES = {LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6}

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
PCAPNG_SHB = 0x0A0D0D0A
PCAPNG_BOM = 0x1A2B3C4D

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = 0x8100
ETHERTYPE_QINQ = 0x88A8

IPV6_EXTENSION_HEADERS = {0, 43, 60}


class CaptureError(Exception):
    pass


class UnsupportedLinkType(CaptureError):
    pass


class CorruptCapture(CaptureError):
    pass


class CaptureReader:
    """Iterable over the TCP/UDP packets of one capture file.

    Counters (``skipped``, ``truncated``, ``oversize``) are filled in as the
    file is consumed.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.skipped: Counter[str] = Counter()
        self.truncated = False
        self.oversize = 0
        self.packets = 0

    @property
    def skipped_count(self) -> int:
        return sum(self.skipped.values())

    def __iter__(self) -> Iterator[PacketRecord]:
        with open(self.path, "rb") as f:
            head = f.read(4)
            if len(head) < 4:
                raise CorruptCapture(f"{self.path}: file too short for a capture header")
            if struct.unpack("<I", head)[0] == PCAPNG_SHB:
                yield from self._read_pcapng(f, head)
            else:
                yield from self._read_pcap(f, head)

    def _emit(self, linktype: int, frame: bytes, orig_len: int, ts_us: int) -> Optional[PacketRecord]:
        if len(frame) < orig_len:
            self.truncated = True
        result = decode_frame(linktype, frame, orig_len, ts_us)
        if isinstance(result, str):
            self.skipped[result] += 1
            return None
        record, ip_len = result
        if ip_len > MTU:
            self.oversize += 1
        self.packets += 1
        return record

    def _read_pcap(self, f: BinaryIO, head: bytes) -> Iterator[PacketRecord]:
        for endian in "<>":
            magic = struct.unpack(endian + "I", head)[0]
            if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
                break
        else:
            raise CorruptCapture(f"{self.path}: not a pcap or pcapng file")
        scale = 1000 if magic == PCAP_MAGIC_NS else 1
        rest = f.read(20)
        if len(rest) < 20:
            raise CorruptCapture(f"{self.path}: truncated global header")
        _, _, _, _, snaplen, network = struct.unpack(endian + "HHiIII", rest)
        linktype = network & 0xFFFF
        if linktype not in SUPPORTED_LINKTYPES:
            raise UnsupportedLinkType(f"{self.path}: link type {linktype}")
        while True:
            rec = f.read(16)
            if not rec:
                return
            if len(rec) < 16:
                raise CorruptCapture(f"{self.path}: truncated record header")
            ts_sec, ts_frac, incl_len, orig_len = struct.unpack(endian + "IIII", rec)
            if incl_len > max(snaplen, 262144) or incl_len > orig_len + 65535:
                raise CorruptCapture(f"{self.path}: implausible record length {incl_len}")
            frame = f.read(incl_len)
            if len(frame) < incl_len:
                raise CorruptCapture(f"{self.path}: file ends inside a packet")
            record = self._emit(linktype, frame, max(orig_len, incl_len), ts_sec * 1_000_000 + ts_frac // scale)
            if record is not None:
                yield record

    def _read_pcapng(self, f: BinaryIO, head: bytes) -> Iterator[PacketRecord]:
        endian = "<"
        interfaces: list[tuple[int, int, int]] = []  # linktype, snaplen, units per second
        last_ts = 0
        block_type_bytes = head
        while True:
            if block_type_bytes is None:
                block_type_bytes = f.read(4)
                if not block_type_bytes:
                    return
            if len(block_type_bytes) < 4:
                raise CorruptCapture(f"{self.path}: truncated block header")
            length_bytes = f.read(4)
            if len(length_bytes) < 4:
                raise CorruptCapture(f"{self.path}: truncated block header")
            if struct.unpack("<I", block_type_bytes)[0] == PCAPNG_SHB:
                bom = f.read(4)
                if len(bom) < 4:
                    raise CorruptCapture(f"{self.path}: truncated section header")
                endian = "<" if struct.unpack("<I", bom)[0] == PCAPNG_BOM else ">"
                if struct.unpack(endian + "I", bom)[0] != PCAPNG_BOM:
                    raise CorruptCapture(f"{self.path}: bad byte-order magic")
                total = struct.unpack(endian + "I", length_bytes)[0]
                body = bom + f.read(max(total - 12, 0) - 4)
                interfaces = []
            else:
                total = struct.unpack(endian + "I", length_bytes)[0]
                body = f.read(max(total - 12, 0))
            block_type = struct.unpack(endian + "I", block_type_bytes)[0]
            block_type_bytes = None
            trailer = f.read(4)
            if total < 12 or total % 4 or len(body) != total - 12 or len(trailer) < 4:
                raise CorruptCapture(f"{self.path}: malformed pcapng block")
            if block_type == 1:  # interface description
                if len(body) < 8:
                    raise CorruptCapture(f"{self.path}: short interface block")
                linktype, _, snaplen = struct.unpack_from(endian + "HHI", body)
                if linktype not in SUPPORTED_LINKTYPES:
                    raise UnsupportedLinkType(f"{self.path}: link type {linktype}")
                interfaces.append((linktype, snaplen, _tsresol(body[8:], endian)))
            elif block_type in (6, 2):  # enhanced / obsolete packet
                if block_type == 6:
                    if len(body) < 20:
                        raise CorruptCapture(f"{self.path}: short packet block")
                    iface, ts_hi, ts_lo, caplen, origlen = struct.unpack_from(endian + "IIIII", body)
                    data_off = 20
                else:
                    if len(body) < 20:
                        raise CorruptCapture(f"{self.path}: short packet block")
                    iface, _, ts_hi, ts_lo, caplen, origlen = struct.unpack_from(endian + "HHIIII", body)
                    data_off = 20
                if iface >= len(interfaces):
                    raise CorruptCapture(f"{self.path}: packet references unknown interface {iface}")
                if data_off + caplen > len(body):
                    raise CorruptCapture(f"{self.path}: packet data overruns block")
                linktype, _, units = interfaces[iface]
                last_ts = ((ts_hi << 32) | ts_lo) * 1_000_000 // units
                record = self._emit(linktype, body[data_off : data_off + caplen], max(origlen, caplen), last_ts)
                if record is not None:
                    yield record
            elif block_type == 3:  # simple packet
                if not interfaces or len(body) < 4:
                    raise CorruptCapture(f"{self.path}: simple packet without interface")
                origlen = struct.unpack_from(endian + "I", body)[0]
                linktype, snaplen, _ = interfaces[0]
                caplen = min(origlen, len(body) - 4, snaplen or origlen)
                record = self._emit(linktype, body[4 : 4 + caplen], origlen, last_ts)
                if record is not None:
                    yield record


def _tsresol(options: bytes, endian: str) -> int:
    pos = 0
    while pos + 4 <= len(options):
        code, length = struct.unpack_from(endian + "HH", options, pos)
        if code == 0:
            break
        if code == 9 and length >= 1:
            value = options[pos + 4]
            return 2 ** (value & 0x7F) if value & 0x80 else 10 ** value
        pos += 4 + length + (-length % 4)
    return 1_000_000


def read_capture(path: str | Path) -> CaptureReader:
    return CaptureReader(path)


def decode_frame(linktype: int, frame: bytes, orig_len: int, ts_us: int):
    """Return (PacketRecord, ip_length) or a skip-reason string."""
    offset = 0
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return "short-frame"
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        offset = 14
        if ethertype == ETHERTYPE_VLAN:
            if len(frame) < 18:
                return "short-frame"
            ethertype = struct.unpack_from("!H", frame, 16)[0]
            offset = 18
        if ethertype in (ETHERTYPE_VLAN, ETHERTYPE_QINQ):
            return "stacked-vlan"
        if ethertype not in (ETHERTYPE_IPV4, ETHERTYPE_IPV6):
            return "non-ip"
    if len(frame) <= offset:
        return "short-frame"
    version = frame[offset] >> 4
    if version == 4 and linktype != LINKTYPE_IPV6:
        return _decode_ipv4(frame, offset, orig_len, ts_us)
    if version == 6 and linktype != LINKTYPE_IPV4:
        return _decode_ipv6(frame, offset, orig_len, ts_us)
    return "non-ip"


def _decode_ipv4(frame: bytes, off: int, orig_len: int, ts_us: int):
    if len(frame) < off + 20:
        return "truncated-header"
    ver_ihl, _, total, _, frag, _, proto = struct.unpack_from("!BBHHHBB", frame, off)
    ihl = (ver_ihl & 0xF) * 4
    if ihl < 20:
        return "bad-ip-header"
    if frag & 0x1FFF:
        return "ip-fragment"
    if proto not in PROTOCOL_NUMBERS:
        return f"ip-proto-{proto}"
    if total == 0:  # segmentation offload leaves the length unset
        total = len(frame) - off
    src = str(ipaddress.IPv4Address(frame[off + 12 : off + 16]))
    dst = str(ipaddress.IPv4Address(frame[off + 16 : off + 20]))
    return _decode_transport(frame, off + ihl, total - ihl, PROTOCOL_NUMBERS[proto], src, dst,
                             orig_len, ts_us, total)


def _decode_ipv6(frame: bytes, off: int, orig_len: int, ts_us: int):
    if len(frame) < off + 40:
        return "truncated-header"
    payload_len = struct.unpack_from("!H", frame, off + 4)[0]
    next_header = frame[off + 6]
    src = str(ipaddress.IPv6Address(frame[off + 8 : off + 24]))
    dst = str(ipaddress.IPv6Address(frame[off + 24 : off + 40]))
    if payload_len == 0:
        payload_len = len(frame) - off - 40
    pos = off + 40
    remaining = payload_len
    while next_header not in PROTOCOL_NUMBERS:
        if next_header in IPV6_EXTENSION_HEADERS or next_header in (44, 51):
            if len(frame) < pos + 8:
                return "truncated-header"
            if next_header == 44:
                if struct.unpack_from("!H", frame, pos + 2)[0] & 0xFFF8:
                    return "ip-fragment"
                ext_len = 8
            elif next_header == 51:
                ext_len = (frame[pos + 1] + 2) * 4
            else:
                ext_len = (frame[pos + 1] + 1) * 8
            next_header = frame[pos]
            pos += ext_len
            remaining -= ext_len
            if remaining < 0:
                return "bad-ip-header"
        else:
            return f"ip-proto-{next_header}"
    return _decode_transport(frame, pos, remaining, PROTOCOL_NUMBERS[next_header], src, dst,
                             orig_len, ts_us, payload_len + 40)


def _decode_transport(frame, off, ip_payload, protocol, src, dst, orig_len, ts_us, ip_len):
    if protocol == TCP:
        if len(frame) < off + 14:
            return "truncated-header"
        sport, dport = struct.unpack_from("!HH", frame, off)
        header_len = (frame[off + 12] >> 4) * 4
        flags = frame[off + 13]
        if header_len < 20:
            return "bad-tcp-header"
    else:
        if len(frame) < off + 8:
            return "truncated-header"
        sport, dport = struct.unpack_from("!HH", frame, off)
        header_len = 8
        flags = 0
    declared = ip_payload - header_len
    if declared < 0:
        return "bad-length"
    captured = max(len(frame) - off - header_len, 0)
    payload = min(declared, captured)
    total = max(orig_len, payload)
    record = PacketRecord(ts_us, src, dst, sport, dport, protocol, payload, total, flags)
    return record, ip_len


# writer

_SRC_MAC = bytes.fromhex("020000000001")
_DST_MAC = bytes.fromhex("020000000002")

TCP_FIN, TCP_SYN, TCP_RST, TCP_PSH, TCP_ACK = 0x01, 0x02, 0x04, 0x08, 0x10


def frame_length(protocol: str, ip_version: int, payload_len: int) -> int:
    """On-wire Ethernet frame length of a synthesized packet."""
    ip_header = 20 if ip_version == 4 else 40
    transport = 20 if protocol == TCP else 8
    return 14 + ip_header + transport + payload_len


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_frame(record: PacketRecord) -> bytes:
    """Synthesize an Ethernet frame for ``record`` with a zero-filled payload."""
    src = ipaddress.ip_address(record.src_ip)
    dst = ipaddress.ip_address(record.dst_ip)
    payload = bytes(record.payload_len)
    if record.protocol == TCP:
        transport = struct.pack("!HHIIBBHHH", record.src_port, record.dst_port, 0, 0, 5 << 4,
                                record.tcp_flags, 65535, 0, 0) + payload
        proto = 6
    else:
        transport = struct.pack("!HHHH", record.src_port, record.dst_port, 8 + len(payload), 0) + payload
        proto = 17
    if src.version == 4:
        header = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(transport), 0, 0x4000, 64, proto, 0,
                             src.packed, dst.packed)
        header = header[:10] + struct.pack("!H", _checksum(header)) + header[12:]
        ethertype = ETHERTYPE_IPV4
    else:
        header = struct.pack("!IHBB16s16s", 6 << 28, len(transport), proto, 64, src.packed, dst.packed)
        ethertype = ETHERTYPE_IPV6
    return _DST_MAC + _SRC_MAC + struct.pack("!H", ethertype) + header + transport


def write_pcap(path: str | Path, records: Iterable[PacketRecord]) -> int:
    """Write records as an Ethernet pcap (microsecond timestamps)."""
    count = 0
    with open(path, "wb") as f:
        f.write(struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, 262144, LINKTYPE_ETHERNET))
        for record in records:
            frame = build_frame(record)
            sec, usec = divmod(record.ts_us, 1_000_000)
            f.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            f.write(frame)
            count += 1
    return count
