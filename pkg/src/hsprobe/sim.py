"""Loopback intercepting proxy reproducing three TLS interception tools.

``ettercap``
    Terminates every TCP connection on every intercepted port at once, fetches
    the genuine certificate upstream, forges a copy (``cert_gen_delay_ms``) and
    serves it. Ports without a TLS upstream get the ClientHello read and then a
    TCP reset.
``webmitm``
    DNS-redirect style catch-all: reads the SNI but always answers with one
    static certificate after a small fixed delay.
``cain``
    Passive first. Until a forged chain exists for an upstream, connections are
    relayed byte for byte and the genuine certificate is captured; forging then
    happens in the background and later connections are intercepted. Upstreams
    that are closed at start-up are not listened on, so their ports keep
    refusing like the real server does.

Redirection is by explicit addressing: the prober dials the simulator's port
for an upstream instead of the upstream itself (:meth:`SimHandle.address_for`).
"""

from __future__ import annotations

import datetime as dt
import enum
import heapq
import itertools
import logging
import random
import selectors
import socket
import socketserver
import struct
import threading
import time
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import Future
from dataclasses import dataclass

from . import tls_codec as codec
from .certs import common_name, forge_certificate
from .responder import drain, negotiate, read_client_hello

log = logging.getLogger(__name__)

Address = tuple[str, int]

UPSTREAM_TIMEOUT = 5.0


class SimMode(str, enum.Enum):
    ETTERCAP = "ettercap"
    WEBMITM = "webmitm"
    CAIN = "cain"


class SimConfigError(ValueError):
    pass


class UpstreamError(OSError):
    pass


@dataclass(frozen=True)
class SimConfig:
    mode: SimMode
    listen_addr: Address = ("127.0.0.1", 0)
    upstream_addr: Address | None = None
    # Further upstreams intercepted by the same simulator, one port each.
    extra_upstreams: tuple[Address, ...] = ()
    cert_gen_delay_ms: float = 100.0
    gen_jitter_ms: float = 0.0
    upstream_extra_delay_ms: float = 0.0
    static_cert: tuple[bytes, ...] | None = None
    static_delay_ms: float = 1.0
    accept_all_ports: bool | None = None
    fragile_capture: bool = False
    byte_log_path: str | None = None
    seed: int = 0
    hello_timeout: float = 10.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SimMode(self.mode))
        object.__setattr__(self, "extra_upstreams", tuple(tuple(a) for a in self.extra_upstreams))
        if self.static_cert is not None:
            object.__setattr__(self, "static_cert", tuple(self.static_cert))
        if self.accept_all_ports is None:
            object.__setattr__(self, "accept_all_ports", self.mode is SimMode.ETTERCAP)
        if self.mode is SimMode.WEBMITM and not self.static_cert:
            raise SimConfigError("webmitm mode requires static_cert")
        if self.mode is not SimMode.WEBMITM and self.upstream_addr is None:
            raise SimConfigError(f"{self.mode.value} mode requires upstream_addr")
        for name in ("cert_gen_delay_ms", "gen_jitter_ms", "upstream_extra_delay_ms", "static_delay_ms"):
            if getattr(self, name) < 0:
                raise SimConfigError(f"{name} must be >= 0")

    @property
    def upstreams(self) -> tuple[Address, ...]:
        if self.upstream_addr is None:
            return ()
        return (tuple(self.upstream_addr),) + self.extra_upstreams


def upstream_label(address: Address) -> str:
    return f"{address[0]}:{address[1]}"


class ForgedCertRegistry:
    """Forged chains keyed by target identity, each produced at most once.

    :meth:`claim` is an atomic check-then-insert: the first caller starts the
    forging job, later callers get the same future.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[Future, dt.datetime]] = {}

    def __contains__(self, identity: str) -> bool:
        with self._lock:
            return identity in self._entries

    def get(self, identity: str) -> Future | None:
        with self._lock:
            entry = self._entries.get(identity)
        return entry[0] if entry else None

    def created_at(self, identity: str) -> dt.datetime | None:
        with self._lock:
            entry = self._entries.get(identity)
        return entry[1] if entry else None

    def claim(self, identity: str, make_chain: Callable[[], list[bytes]]) -> Future:
        with self._lock:
            if identity in self._entries:
                return self._entries[identity][0]
            fut: Future = Future()
            self._entries[identity] = (fut, dt.datetime.now(dt.timezone.utc))

        def run() -> None:
            try:
                fut.set_result(make_chain())
            except Exception as exc:  # surfaces via fut.result()
                fut.set_exception(exc)

        threading.Thread(target=run, name=f"forge-{identity}", daemon=True).start()
        return fut

    def identities(self) -> list[str]:
        with self._lock:
            return list(self._entries)


# -- byte log ------------------------------------------------------------------

_FRAME = struct.Struct(">IBdI")
INBOUND, OUTBOUND = 0, 1


@dataclass(frozen=True)
class LogFrame:
    connection_id: int
    direction: int
    timestamp: float
    data: bytes


class ByteLog:
    """Binary append log of ``(connection id, direction, timestamp, bytes)`` frames."""

    def __init__(self, path: str) -> None:
        self._fh = open(path, "ab")
        self._lock = threading.Lock()

    def write(self, conn_id: int, direction: int, data: bytes) -> None:
        frame = _FRAME.pack(conn_id, direction, time.time(), len(data)) + data
        with self._lock:
            self._fh.write(frame)
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def read_byte_log(path: str) -> Iterator[LogFrame]:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos + _FRAME.size <= len(data):
        conn_id, direction, ts, n = _FRAME.unpack_from(data, pos)
        pos += _FRAME.size
        if pos + n > len(data):
            break
        yield LogFrame(conn_id, direction, ts, data[pos:pos + n])
        pos += n


# -- connection handling -------------------------------------------------------

def _reset(sock: socket.socket) -> None:
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        sock.close()
    except OSError:
        pass


class _Conn:
    """Per-connection context: socket, route and byte logging."""

    def __init__(self, sim: _Simulator, sock: socket.socket, upstream: Address | None) -> None:
        self.sim = sim
        self.sock = sock
        self.upstream = upstream
        self.id = next(sim.conn_ids)

    def log_in(self, data: bytes) -> None:
        if self.sim.byte_log:
            self.sim.byte_log.write(self.id, INBOUND, data)

    def send(self, data: bytes) -> None:
        if self.sim.byte_log:
            self.sim.byte_log.write(self.id, OUTBOUND, data)
        self.sock.sendall(data)


class _Simulator:
    def __init__(self, config: SimConfig) -> None:
        self.config = config
        self.registry = ForgedCertRegistry()
        self.conn_ids = itertools.count(1)
        self.byte_log = ByteLog(config.byte_log_path) if config.byte_log_path else None
        self._lock = threading.Lock()
        self._rng = random.Random(config.seed)
        self.intercepted = 0
        self.passed_through = 0

    @property
    def one_way(self) -> float:
        return self.config.upstream_extra_delay_ms / 1000.0

    def count_interception(self) -> None:
        with self._lock:
            self.intercepted += 1

    def gen_delay_ms(self) -> float:
        jitter = self.config.gen_jitter_ms
        if not jitter:
            return self.config.cert_gen_delay_ms
        with self._lock:
            return self.config.cert_gen_delay_ms + self._rng.uniform(0, jitter)

    # ettercap / intercepting path

    def fetch_upstream(self, upstream: Address, raw_hello: bytes) -> list[bytes]:
        """Genuine chain of *upstream*, paying the emulated distance each way."""
        try:
            up = socket.create_connection(upstream, timeout=UPSTREAM_TIMEOUT)
        except OSError as exc:
            raise UpstreamError(f"upstream {upstream_label(upstream)} unreachable: {exc}") from exc
        try:
            time.sleep(self.one_way)
            up.sendall(raw_hello)
            buf, asm = b"", codec.HandshakeReassembler()
            while True:
                chunk = up.recv(65536)
                if not chunk:
                    raise UpstreamError("upstream closed before Certificate")
                buf += chunk
                while (parsed := codec.parse_record(buf)) is not None:
                    record, buf = parsed
                    if record.content_type != codec.ContentType.HANDSHAKE:
                        raise UpstreamError("upstream did not answer with a certificate")
                    for msg in asm.feed(record.payload):
                        if msg.msg_type == codec.HandshakeType.CERTIFICATE:
                            chain = codec.certificate_chain(msg)
                            time.sleep(self.one_way)
                            return chain
        except (OSError, codec.TlsError) as exc:
            if isinstance(exc, UpstreamError):
                raise
            raise UpstreamError(f"upstream {upstream_label(upstream)}: {exc}") from exc
        finally:
            up.close()

    def identity_for(self, hello: codec.ClientHelloConfig, genuine: Sequence[bytes],
                     upstream: Address | None) -> str:
        if hello.sni:
            return hello.sni
        cn = common_name(genuine[0]) if genuine else None
        return cn or upstream_label(upstream)

    def serve_chain(self, conn: _Conn, hello: codec.ClientHelloConfig, chain: Sequence[bytes]) -> None:
        version, suite = negotiate(hello)
        conn.send(codec.build_certificate_flight(chain, version, suite))
        drain(conn.sock, conn.log_in)

    def handle(self, conn: _Conn) -> None:
        mode = self.config.mode
        if mode is SimMode.CAIN and conn.upstream is not None and \
                upstream_label(conn.upstream) not in self.registry:
            self.pass_through(conn)
            return
        got = read_client_hello(conn.sock, self.config.hello_timeout, conn.log_in)
        if got is None:
            return
        raw_hello, hello = got
        self.count_interception()
        if mode is SimMode.WEBMITM:
            time.sleep(self.config.static_delay_ms / 1000.0)
            self.serve_chain(conn, hello, self.config.static_cert)
            return
        try:
            genuine = self.fetch_upstream(conn.upstream, raw_hello)
        except UpstreamError as exc:
            log.debug("conn %d: %s; resetting client", conn.id, exc)
            _reset(conn.sock)
            return
        if mode is SimMode.ETTERCAP:
            identity = self.identity_for(hello, genuine, conn.upstream)
            chain = forge_certificate(identity, self.gen_delay_ms(), self.config.seed)
        else:
            forged = self.registry.get(upstream_label(conn.upstream))
            chain = forged.result()
            time.sleep(self.gen_delay_ms() / 1000.0)  # per-connection re-signing
        self.serve_chain(conn, hello, chain)

    # cain pass-through

    def start_forging(self, upstream: Address, genuine: Sequence[bytes]) -> None:
        identity = common_name(genuine[0]) or upstream_label(upstream)
        key = upstream_label(upstream)
        if key not in self.registry:
            log.debug("captured certificate for %s; forging %r", key, identity)
        self.registry.claim(key, lambda: forge_certificate(identity, self.gen_delay_ms(), self.config.seed))

    def pass_through(self, conn: _Conn) -> None:
        with self._lock:
            self.passed_through += 1
        try:
            up = socket.create_connection(conn.upstream, timeout=UPSTREAM_TIMEOUT)
        except OSError:
            _reset(conn.sock)
            return
        up.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        captured: list[list[bytes]] = []

        def on_certificate(chain: list[bytes]) -> None:
            captured.append(chain)
            if not self.config.fragile_capture:
                self.start_forging(conn.upstream, chain)

        client_clean = _relay(conn, up, self.one_way, on_certificate)
        if captured and self.config.fragile_capture and client_clean:
            self.start_forging(conn.upstream, captured[0])


def _relay(conn: _Conn, up: socket.socket, one_way: float,
           on_certificate: Callable[[list[bytes]], None]) -> bool:
    """Relay both directions through delay lines of *one_way* seconds.

    Returns True when the client side ended with an orderly close and False
    when it was reset.
    """
    client = conn.sock
    client.setblocking(False)
    up.setblocking(False)
    sel = selectors.DefaultSelector()
    sel.register(client, selectors.EVENT_READ, "client")
    sel.register(up, selectors.EVENT_READ, "upstream")
    pending: list[tuple[float, int, str, bytes | None]] = []
    seq = itertools.count()
    open_reads = {"client", "upstream"}
    client_clean = True
    watch = _CertificateWatch(on_certificate)

    def deliver(dest: str, data: bytes | None) -> bool:
        sock = up if dest == "upstream" else client
        try:
            if data is None:
                sock.shutdown(socket.SHUT_WR)
            else:
                sock.setblocking(True)
                if dest == "client":
                    conn.send(data)
                else:
                    sock.sendall(data)
                sock.setblocking(False)
        except OSError:
            return False
        return True

    try:
        while open_reads or pending:
            now = time.monotonic()
            while pending and pending[0][0] <= now:
                _, _, dest, data = heapq.heappop(pending)
                if not deliver(dest, data):
                    return client_clean
            if not open_reads and not pending:
                break
            timeout = max(0.0, pending[0][0] - now) if pending else None
            for key, _ in sel.select(timeout):
                src = key.data
                dest = "upstream" if src == "client" else "client"
                try:
                    data = key.fileobj.recv(65536)
                except BlockingIOError:
                    continue
                except OSError:
                    if src == "client":
                        client_clean = False
                    _reset(up)
                    return client_clean
                if src == "client":
                    if data:
                        conn.log_in(data)
                else:
                    watch.feed(data)
                if not data:
                    sel.unregister(key.fileobj)
                    open_reads.discard(src)
                heapq.heappush(pending, (time.monotonic() + one_way, next(seq), dest, data or None))
    finally:
        sel.close()
        up.close()
    return client_clean


class _CertificateWatch:
    """Scan a server-to-client stream for the first Certificate message."""

    def __init__(self, callback: Callable[[list[bytes]], None]) -> None:
        self._callback = callback
        self._buf = b""
        self._asm = codec.HandshakeReassembler()
        self._done = False

    def feed(self, data: bytes) -> None:
        if self._done or not data:
            return
        self._buf += data
        try:
            while (parsed := codec.parse_record(self._buf)) is not None:
                record, self._buf = parsed
                if record.content_type != codec.ContentType.HANDSHAKE:
                    self._done = True
                    return
                for msg in self._asm.feed(record.payload):
                    if msg.msg_type == codec.HandshakeType.CERTIFICATE:
                        self._done = True
                        self._callback(codec.certificate_chain(msg))
                        return
        except codec.TlsError:
            self._done = True


class _Handler(socketserver.BaseRequestHandler):
    server: _SimServer

    def handle(self) -> None:
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Conn(self.server.sim, self.request, self.server.upstream)
        try:
            self.server.sim.handle(conn)
        except OSError as exc:
            log.debug("conn %d ended: %s", conn.id, exc)


class _SimServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    block_on_close = False

    def __init__(self, address: Address, sim: _Simulator, upstream: Address | None) -> None:
        self.sim = sim
        self.upstream = upstream
        super().__init__(address, _Handler)

    def handle_error(self, request, client_address) -> None:
        log.debug("sim: error serving %s", client_address, exc_info=True)


def _accepts_tcp(address: Address, timeout: float = 1.0) -> bool:
    try:
        socket.create_connection(address, timeout=timeout).close()
    except OSError:
        return False
    return True


class SimHandle:
    """A running simulator. Stop it with :meth:`stop` or use it as a context manager."""

    def __init__(self, sim: _Simulator, servers: dict[Address | None, _SimServer]) -> None:
        self._sim = sim
        self._servers = servers
        self._threads = []
        for srv in servers.values():
            t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05},
                                 name="sim-acceptor", daemon=True)
            t.start()
            self._threads.append(t)

    @property
    def config(self) -> SimConfig:
        return self._sim.config

    @property
    def registry(self) -> ForgedCertRegistry:
        return self._sim.registry

    @property
    def intercepted(self) -> int:
        """Connections answered by the simulator itself (not relayed)."""
        return self._sim.intercepted

    @property
    def passed_through(self) -> int:
        return self._sim.passed_through

    @property
    def ports(self) -> dict[Address | None, int]:
        return {up: srv.server_address[1] for up, srv in self._servers.items()}

    @property
    def address(self) -> Address:
        """Listening address for the primary upstream (or the only listener)."""
        primary = self.config.upstreams[0] if self.config.upstreams else None
        srv = self._servers.get(primary) or next(iter(self._servers.values()))
        return srv.server_address[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def address_for(self, upstream: Address) -> Address:
        """Where a victim's connection to *upstream* ends up.

        Upstreams the simulator does not listen for are reached directly. A
        webmitm simulator without an upstream stands for a catch-all rogue
        resolver and receives everything.
        """
        if self.config.mode is SimMode.WEBMITM and self.config.upstream_addr is None:
            return self.address
        srv = self._servers.get(tuple(upstream))
        return srv.server_address[:2] if srv else tuple(upstream)

    def is_intercepting(self, upstream: Address) -> bool:
        if self.config.mode is not SimMode.CAIN:
            return True
        return upstream_label(upstream) in self._sim.registry

    def client_path(self, upstream: Address, lan_one_way_ms: float = 0.0) -> Callable[[], tuple[float, float]]:
        """Path model for :class:`~hsprobe.netem.EmulatedNetwork`.

        While cain relays an upstream, the victim's TCP handshake really
        travels to the genuine server, so the connect pays the upstream
        distance too; relayed data already pays it inside the simulator.
        """
        def latency() -> tuple[float, float]:
            connect = lan_one_way_ms
            if not self.is_intercepting(upstream):
                connect += self.config.upstream_extra_delay_ms
            return connect, lan_one_way_ms
        return latency

    def stop(self) -> None:
        for srv in self._servers.values():
            srv.shutdown()
            srv.server_close()
        for t in self._threads:
            t.join()
        if self._sim.byte_log:
            self._sim.byte_log.close()

    def __enter__(self) -> SimHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def run_sim(config: SimConfig) -> SimHandle:
    """Bind the simulator's listeners and start serving in background threads."""
    sim = _Simulator(config)
    host = config.listen_addr[0]
    servers: dict[Address | None, _SimServer] = {}
    try:
        if config.mode is SimMode.WEBMITM:
            primary = config.upstreams[0] if config.upstreams else None
            servers[primary] = _SimServer(config.listen_addr, sim, primary)
        else:
            for i, upstream in enumerate(config.upstreams):
                if not config.accept_all_ports and not _accepts_tcp(upstream):
                    log.info("upstream %s closed; not intercepting it", upstream_label(upstream))
                    continue
                addr = config.listen_addr if i == 0 else (host, 0)
                servers[upstream] = _SimServer(addr, sim, upstream)
    except OSError:
        for srv in servers.values():
            srv.server_close()
        raise
    if not servers:
        raise SimConfigError("no upstream to intercept")
    return SimHandle(sim, servers)
