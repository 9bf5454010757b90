"""Independent reference implementations the tests compare against."""

import ipaddress
from collections import defaultdict

import dns.flags
import dns.message
import dns.rdatatype


def reference_query_wire(domain, qtype="A"):
    """Query bytes from dnspython with the id normalized to 0."""
    msg = dns.message.make_query(domain, qtype, use_edns=False)
    msg.id = 0
    msg.flags = dns.flags.RD
    return msg.to_wire()


def _endpoint_order(ip, port):
    addr = ipaddress.ip_address(ip)
    return (addr.version, int(addr), port)


def brute_force_flows(packets, idle_timeout=300.0):
    """Flows by direct definition: walk each unordered endpoint pair's packets
    in time order and cut wherever the gap exceeds the timeout.

    Returns a sorted list of (key, packets, payload_bytes, duration_us).
    """
    limit = idle_timeout * 1e6
    buckets = defaultdict(list)
    for p in packets:
        ends = sorted([(p.src_ip, p.src_port), (p.dst_ip, p.dst_port)], key=lambda e: _endpoint_order(*e))
        buckets[(p.protocol, ends[0], ends[1])].append(p)
    result = []
    for key, items in buckets.items():
        items = sorted(items, key=lambda p: p.ts_us)
        start = 0
        for i in range(1, len(items) + 1):
            if i == len(items) or items[i].ts_us - items[i - 1].ts_us > limit:
                chunk = items[start:i]
                result.append((key, len(chunk), sum(p.payload_len for p in chunk),
                               chunk[-1].ts_us - chunk[0].ts_us))
                start = i
    return sorted(result)


def flows_as_tuples(flows):
    return sorted(((f.protocol, (f.a_ip, f.a_port), (f.b_ip, f.b_port)), f.packet_count, f.payload_bytes,
                   f.duration_us) for f in flows)
