"""Recording relay: a user-space stand-in for a packet capture.

Clients connect to the tap instead of the real server. Every chunk the tap
relays is recorded as packets between the client's address and the upstream
address, so the resulting trace looks like a direct conversation.

TCP packet model (deterministic given the relayed chunks):

* connection setup: SYN, SYN/ACK, ACK (no payload);
* each relayed chunk is cut into segments of at most ``mss`` bytes, and the
  receiving side answers with one pure ACK per ``ack_every`` segments
  (rounded up);
* each half-close: FIN from the closing side, ACK from the peer.

UDP datagrams map one-to-one onto packets.
"""

from __future__ import annotations

import ipaddress
import socket
import threading
import time
from pathlib import Path
from typing import Optional

from .packets import TCP, UDP, PacketRecord
from .pcap import TCP_ACK, TCP_FIN, TCP_PSH, TCP_SYN, frame_length, write_pcap

DEFAULT_MSS = 1448


def _now_us() -> int:
    return time.time_ns() // 1000


class TapProxy:
    def __init__(self, upstream: tuple[str, int], protocol: str = TCP, listen_host: str = "127.0.0.1",
                 mss: int = DEFAULT_MSS, ack_every: int = 2):
        if protocol not in (TCP, UDP):
            raise ValueError("protocol must be TCP or UDP")
        self.upstream = (upstream[0], int(upstream[1]))
        self.protocol = protocol
        self.mss = mss
        self.ack_every = ack_every
        self._ip_version = ipaddress.ip_address(upstream[0]).version
        family = socket.AF_INET6 if ":" in listen_host else socket.AF_INET
        kind = socket.SOCK_STREAM if protocol == TCP else socket.SOCK_DGRAM
        self._listener = socket.socket(family, kind)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((listen_host, 0))
        if protocol == TCP:
            self._listener.listen(128)
        self.address = self._listener.getsockname()[:2]
        self._records: list[PacketRecord] = []
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._udp_peers: dict[tuple, socket.socket] = {}

    @property
    def port(self) -> int:
        return self.address[1]

    @property
    def records(self) -> list[PacketRecord]:
        with self._lock:
            return list(self._records)

    def clear(self) -> None:
        with self._lock:
            self._records.clear()

    def wait_idle(self, quiet: float = 0.05, limit: float = 2.0) -> None:
        """Block until no packet has been recorded for ``quiet`` seconds, so
        closing handshakes of finished connections are in the trace."""
        deadline = time.monotonic() + limit
        count = -1
        while time.monotonic() < deadline:
            current = len(self.records)
            if current == count:
                return
            count = current
            time.sleep(quiet)

    def write_pcap(self, path: str | Path) -> int:
        return write_pcap(path, sorted(self.records, key=lambda r: r.ts_us))

    def start(self) -> "TapProxy":
        target = self._accept_loop if self.protocol == TCP else self._udp_loop
        threading.Thread(target=target, daemon=True).start()
        return self

    def stop(self) -> None:
        self._stopped.set()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        for sock in list(self._udp_peers.values()):
            sock.close()

    def __enter__(self) -> "TapProxy":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _record(self, src: tuple[str, int], dst: tuple[str, int], payload: int, flags: int = 0) -> None:
        record = PacketRecord(
            ts_us=_now_us(),
            src_ip=src[0], dst_ip=dst[0], src_port=src[1], dst_port=dst[1],
            protocol=self.protocol,
            payload_len=payload,
            total_len=frame_length(self.protocol, self._ip_version, payload),
            tcp_flags=flags,
        )
        with self._lock:
            self._records.append(record)

    def _client_endpoint(self, peer) -> tuple[str, int]:
        host = peer[0]
        # Keep the trace single-family even if the client dialled v4-mapped.
        if self._ip_version == 4 and host.startswith("::ffff:"):
            host = host[7:]
        return (host, peer[1])

    # TCP

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                client, peer = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._relay, args=(client, self._client_endpoint(peer)), daemon=True).start()

    def _relay(self, client: socket.socket, client_ep: tuple[str, int]) -> None:
        try:
            server = socket.create_connection(self.upstream, timeout=10)
        except OSError:
            client.close()
            return
        for sock in (client, server):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(None)
        up = self.upstream
        self._record(client_ep, up, 0, TCP_SYN)
        self._record(up, client_ep, 0, TCP_SYN | TCP_ACK)
        self._record(client_ep, up, 0, TCP_ACK)
        done = threading.Event()
        remaining = [2]
        lock = threading.Lock()

        def pump(src_sock, dst_sock, src_ep, dst_ep):
            while True:
                try:
                    chunk = src_sock.recv(65536)
                except OSError:
                    chunk = b""
                if not chunk:
                    break
                segments = 0
                for offset in range(0, len(chunk), self.mss):
                    self._record(src_ep, dst_ep, len(chunk[offset : offset + self.mss]), TCP_PSH | TCP_ACK)
                    segments += 1
                for _ in range(-(-segments // self.ack_every)):
                    self._record(dst_ep, src_ep, 0, TCP_ACK)
                try:
                    dst_sock.sendall(chunk)
                except OSError:
                    break
            self._record(src_ep, dst_ep, 0, TCP_FIN | TCP_ACK)
            self._record(dst_ep, src_ep, 0, TCP_ACK)
            try:
                dst_sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            with lock:
                remaining[0] -= 1
                if remaining[0] == 0:
                    done.set()

        threading.Thread(target=pump, args=(server, client, up, client_ep), daemon=True).start()
        pump(client, server, client_ep, up)
        done.wait(30)
        client.close()
        server.close()

    # UDP

    def _udp_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                data, peer = self._listener.recvfrom(65535)
            except OSError:
                return
            if peer is None:  # socket shut down
                return
            client_ep = self._client_endpoint(peer)
            upstream_sock = self._udp_peers.get(peer)
            if upstream_sock is None:
                family = socket.AF_INET6 if self._ip_version == 6 else socket.AF_INET
                upstream_sock = socket.socket(family, socket.SOCK_DGRAM)
                upstream_sock.connect(self.upstream)
                self._udp_peers[peer] = upstream_sock
                threading.Thread(target=self._udp_back, args=(upstream_sock, peer, client_ep), daemon=True).start()
            self._record(client_ep, self.upstream, len(data))
            try:
                upstream_sock.send(data)
            except OSError:
                pass

    def _udp_back(self, upstream_sock: socket.socket, peer, client_ep) -> None:
        while not self._stopped.is_set():
            try:
                data = upstream_sock.recv(65535)
            except OSError:
                return
            self._record(self.upstream, client_ep, len(data))
            try:
                self._listener.sendto(data, peer)
            except OSError:
                return
