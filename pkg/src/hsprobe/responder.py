"""Stand-in for a genuine TLS server that stops after its certificate flight."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass

from . import tls_codec as codec

log = logging.getLogger(__name__)

HELLO_TIMEOUT = 10.0


def read_client_hello(sock: socket.socket, timeout: float = HELLO_TIMEOUT,
                      sink=None) -> tuple[bytes, codec.ClientHelloConfig] | None:
    """Read records until a full ClientHello arrived.

    Returns ``(raw_bytes, parsed)`` or None when the peer closed, stalled past
    *timeout* or sent something that is not a ClientHello. *sink* receives every
    chunk read.
    """
    sock.settimeout(timeout)
    raw = b""
    asm = codec.HandshakeReassembler()
    buf = b""
    deadline = time.monotonic() + timeout
    try:
        while time.monotonic() < deadline:
            chunk = sock.recv(65536)
            if not chunk:
                return None
            if sink is not None:
                sink(chunk)
            raw += chunk
            buf += chunk
            while (parsed := codec.parse_record(buf)) is not None:
                record, buf = parsed
                if record.content_type != codec.ContentType.HANDSHAKE:
                    return None
                for msg in asm.feed(record.payload):
                    if msg.msg_type != codec.HandshakeType.CLIENT_HELLO:
                        return None
                    try:
                        return raw, codec.parse_client_hello(msg.serialize())
                    except codec.InvalidConfig:
                        # Odd but well-framed hello (e.g. an IP literal in SNI).
                        return raw, codec.ClientHelloConfig(cipher_suite_ids=(0xC02F,))
    except (OSError, codec.TlsError):
        return None
    return None


def negotiate(hello: codec.ClientHelloConfig) -> tuple[tuple[int, int], int]:
    version = min(hello.max_version, codec.TLS1_2)
    return version, hello.cipher_suite_ids[0]


def drain(sock: socket.socket, sink=None) -> None:
    """Hold the connection open until the peer closes, discarding what it sends."""
    sock.settimeout(None)
    try:
        while chunk := sock.recv(65536):
            if sink is not None:
                sink(chunk)
    except OSError:
        pass


@dataclass(frozen=True)
class ResponderConfig:
    cert_chain: Sequence[bytes]
    listen_addr: tuple[str, int] = ("127.0.0.1", 0)
    processing_delay_ms: float = 0.0
    # None serves any name; otherwise the accepted names, others get an alert.
    strict_names: tuple[str, ...] | None = None
    hello_timeout: float = HELLO_TIMEOUT

    def __post_init__(self) -> None:
        object.__setattr__(self, "cert_chain", tuple(self.cert_chain))
        if not self.cert_chain:
            raise ValueError("cert_chain must not be empty")
        if self.processing_delay_ms < 0:
            raise ValueError("processing_delay_ms must be >= 0")
        if self.strict_names is not None:
            object.__setattr__(self, "strict_names", tuple(self.strict_names))


class _Handler(socketserver.BaseRequestHandler):
    server: _ResponderServer

    def handle(self) -> None:
        cfg = self.server.config
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        got = read_client_hello(sock, cfg.hello_timeout)
        if got is None:
            return
        received = time.monotonic()
        _, hello = got
        self.server.count()
        if cfg.strict_names is not None and hello.sni not in cfg.strict_names:
            sock.sendall(codec.build_alert(codec.AlertDescription.UNRECOGNIZED_NAME))
            return
        version, suite = negotiate(hello)
        flight = codec.build_certificate_flight(cfg.cert_chain, version, suite)
        remaining = received + cfg.processing_delay_ms / 1000.0 - time.monotonic()
        if remaining > 0:
            time.sleep(remaining)
        try:
            sock.sendall(flight)
        except OSError:
            return
        drain(sock)


class _ResponderServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    block_on_close = False

    def __init__(self, config: ResponderConfig) -> None:
        self.config = config
        self.connections = 0
        self._lock = threading.Lock()
        super().__init__(config.listen_addr, _Handler)

    def count(self) -> None:
        with self._lock:
            self.connections += 1

    def handle_error(self, request, client_address) -> None:
        log.debug("responder: error serving %s", client_address, exc_info=True)


class ResponderHandle:
    """A running responder; use as a context manager or call :meth:`stop`."""

    def __init__(self, server: _ResponderServer) -> None:
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="responder", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    @property
    def hellos_served(self) -> int:
        return self._server.connections

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self) -> ResponderHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def run_responder(config: ResponderConfig) -> ResponderHandle:
    """Bind and start serving in a background thread."""
    return ResponderHandle(_ResponderServer(config))
