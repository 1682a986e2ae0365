"""Timed partial TLS handshakes, RTT estimation and the active behavioral probes."""

from __future__ import annotations

import datetime as dt
import enum
import ipaddress
import logging
import os
import socket
import struct
import time
from dataclasses import dataclass, replace

from . import tls_codec as codec
from .netem import DirectNetwork, Network

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0
_RECV_SIZE = 65536


class Outcome(str, enum.Enum):
    OK = "ok"
    CONNECT_REFUSED = "connect_refused"
    CONNECT_TIMEOUT = "connect_timeout"
    READ_TIMEOUT = "read_timeout"
    RESET_DURING_HANDSHAKE = "reset_during_handshake"
    PROTOCOL_ERROR = "protocol_error"


class PortStatus(str, enum.Enum):
    ACCEPTED = "accepted"
    REFUSED = "refused"
    TIMED_OUT = "timed_out"


class AbortMode(str, enum.Enum):
    FIN = "fin"
    RST = "rst"


class AllProbesFailed(RuntimeError):
    """Every RTT connect attempt failed; ``cause`` is the last failure outcome."""

    def __init__(self, cause: Outcome, attempts: int) -> None:
        super().__init__(f"all {attempts} RTT probes failed (last: {cause.value})")
        self.cause = cause
        self.attempts = attempts


def _is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class TargetSpec:
    host: str
    port: int = 443
    sni: str | None = None
    label: str = ""

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if self.sni is None and not _is_ip_literal(self.host) and codec.is_valid_hostname(self.host):
            object.__setattr__(self, "sni", self.host)
        if not self.label:
            object.__setattr__(self, "label", f"{self.host}:{self.port}")

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)


@dataclass(frozen=True)
class RttEstimate:
    sample_durations: tuple[float, ...]
    failures: int = 0

    def __post_init__(self) -> None:
        if not self.sample_durations:
            raise ValueError("RttEstimate needs at least one sample")

    @property
    def count(self) -> int:
        return len(self.sample_durations)

    @property
    def mean_ms(self) -> float:
        return sum(self.sample_durations) / len(self.sample_durations)


@dataclass(frozen=True)
class ProbeSample:
    started_at: dt.datetime
    outcome: Outcome
    tcp_connect_ms: float | None = None
    hello_to_cert_ms: float | None = None
    cert: codec.CertificateInfo | None = None
    negotiated_version: tuple[int, int] | None = None
    sni: str | None = None
    abort_mode: AbortMode = AbortMode.FIN
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK


@dataclass(frozen=True)
class SamplingSchedule:
    sample_count: int = 19
    total_duration: float = 300.0
    rtt_probe_count: int = 5

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.total_duration < 0:
            raise ValueError("total_duration must be >= 0")
        if self.rtt_probe_count < 1:
            raise ValueError("rtt_probe_count must be >= 1")

    @property
    def spacing(self) -> float:
        """Gap between sample starts; the first and last samples bound the period."""
        if self.sample_count == 1:
            return 0.0
        return self.total_duration / (self.sample_count - 1)


PAPER_SCHEDULE = SamplingSchedule(19, 300.0, 5)


def _elapsed_ms(start: float) -> float:
    return (time.monotonic() - start) * 1000.0


def _classify_connect_error(exc: OSError) -> Outcome:
    if isinstance(exc, (socket.timeout, TimeoutError)):
        return Outcome.CONNECT_TIMEOUT
    if isinstance(exc, ConnectionRefusedError):
        return Outcome.CONNECT_REFUSED
    return Outcome.CONNECT_REFUSED if exc.errno is not None else Outcome.CONNECT_TIMEOUT


def _close(sock, abort_mode: AbortMode) -> None:
    try:
        if abort_mode is AbortMode.RST:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        sock.close()
    except OSError:
        pass


def measure_rtt(target: TargetSpec, n: int = 5, timeout: float = DEFAULT_TIMEOUT,
                network: Network | None = None) -> RttEstimate:
    """Estimate RTT from *n* sequential TCP connects.

    Each connection is closed as soon as it is established. Failed attempts are
    left out of the mean and counted in ``failures``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    network = network or DirectNetwork()
    durations, last_failure = [], None
    for _ in range(n):
        start = time.monotonic()
        try:
            sock = network.connect(target.address, timeout)
        except OSError as exc:
            last_failure = _classify_connect_error(exc)
            continue
        durations.append(_elapsed_ms(start))
        _close(sock, AbortMode.FIN)
    if not durations:
        raise AllProbesFailed(last_failure, n)
    return RttEstimate(tuple(durations), failures=n - len(durations))


def probe_handshake(target: TargetSpec, hello: codec.ClientHelloConfig | None = None,
                    timeout: float = DEFAULT_TIMEOUT, abort_mode: AbortMode | str = AbortMode.FIN,
                    network: Network | None = None) -> ProbeSample:
    """Connect, send a ClientHello, and hang up once the Certificate is complete.

    ``tcp_connect_ms`` covers connect initiation to completion;
    ``hello_to_cert_ms`` runs from just before the ClientHello is written until
    the last byte of the Certificate message has been read. Failures are
    reported through ``outcome``; fields for phases never reached stay None.
    """
    abort_mode = AbortMode(abort_mode)
    if hello is None:
        hello = codec.ClientHelloConfig(sni=target.sni)
    network = network or DirectNetwork()
    wire = codec.build_client_hello(hello)
    started_at = dt.datetime.now(dt.timezone.utc)
    sample = ProbeSample(started_at=started_at, outcome=Outcome.OK, sni=hello.sni, abort_mode=abort_mode)

    start = time.monotonic()
    try:
        sock = network.connect(target.address, timeout)
    except OSError as exc:
        return replace(sample, outcome=_classify_connect_error(exc), detail=str(exc))
    tcp_connect_ms = _elapsed_ms(start)
    sample = replace(sample, tcp_connect_ms=tcp_connect_ms)

    try:
        sock.settimeout(timeout)
        hello_start = time.monotonic()
        sock.sendall(wire)
        return _read_until_certificate(sock, sample, hello_start, timeout)
    except (socket.timeout, TimeoutError):
        return replace(sample, outcome=Outcome.READ_TIMEOUT)
    except (ConnectionResetError, BrokenPipeError, ConnectionAbortedError) as exc:
        return replace(sample, outcome=Outcome.RESET_DURING_HANDSHAKE, detail=str(exc))
    except OSError as exc:
        return replace(sample, outcome=Outcome.RESET_DURING_HANDSHAKE, detail=str(exc))
    finally:
        _close(sock, abort_mode)


def _read_until_certificate(sock, sample: ProbeSample, hello_start: float,
                            timeout: float) -> ProbeSample:
    deadline = hello_start + timeout
    buf = b""
    asm = codec.HandshakeReassembler()
    version = None
    while True:
        if time.monotonic() > deadline:
            return replace(sample, outcome=Outcome.READ_TIMEOUT)
        chunk = sock.recv(_RECV_SIZE)
        if not chunk:
            return replace(sample, outcome=Outcome.RESET_DURING_HANDSHAKE,
                           detail="connection closed before Certificate")
        buf += chunk
        try:
            while (parsed := codec.parse_record(buf)) is not None:
                record, buf = parsed
                if record.content_type == codec.ContentType.ALERT:
                    desc = record.payload[1] if len(record.payload) > 1 else None
                    return replace(sample, outcome=Outcome.PROTOCOL_ERROR,
                                   negotiated_version=version, detail=f"alert {desc}")
                if record.content_type != codec.ContentType.HANDSHAKE:
                    return replace(sample, outcome=Outcome.PROTOCOL_ERROR,
                                   detail=f"unexpected record type {int(record.content_type)}")
                for msg in asm.feed(record.payload):
                    if msg.msg_type == codec.HandshakeType.SERVER_HELLO:
                        version = codec.server_hello_version(msg)
                    elif msg.msg_type == codec.HandshakeType.CERTIFICATE:
                        received = time.monotonic()
                        cert = codec.parse_certificate_message(msg, received_at=received)
                        return replace(sample, hello_to_cert_ms=(received - hello_start) * 1000.0,
                                       cert=cert, negotiated_version=version)
        except codec.TlsError as exc:
            return replace(sample, outcome=Outcome.PROTOCOL_ERROR, detail=str(exc))


def _sleep_until(deadline: float) -> None:
    while (remaining := deadline - time.monotonic()) > 0:
        time.sleep(remaining)


def run_session(target: TargetSpec, schedule: SamplingSchedule = PAPER_SCHEDULE,
                timeout: float = DEFAULT_TIMEOUT, abort_mode: AbortMode | str = AbortMode.FIN,
                network: Network | None = None,
                hello: codec.ClientHelloConfig | None = None) -> tuple[RttEstimate, list[ProbeSample]]:
    """One RTT estimate followed by ``sample_count`` evenly spaced handshake probes.

    Raises :class:`AllProbesFailed` before any handshake when no connect
    succeeds; individual sample failures never end the session early.
    """
    rtt = measure_rtt(target, schedule.rtt_probe_count, timeout, network)
    samples = []
    origin = time.monotonic()
    for i in range(schedule.sample_count):
        _sleep_until(origin + i * schedule.spacing)
        h = None if hello is None else replace(hello, client_random=os.urandom(32))
        samples.append(probe_handshake(target, h, timeout, abort_mode, network))
        log.debug("%s sample %d: %s", target.label, i, samples[-1].outcome.value)
    return rtt, samples


def probe_closed_port(host: str, port: int, timeout: float = DEFAULT_TIMEOUT,
                      network: Network | None = None) -> PortStatus:
    """Try a TCP connect to a port the genuine server keeps closed."""
    network = network or DirectNetwork()
    try:
        sock = network.connect((host, port), timeout)
    except OSError as exc:
        if _classify_connect_error(exc) is Outcome.CONNECT_TIMEOUT:
            return PortStatus.TIMED_OUT
        return PortStatus.REFUSED
    _close(sock, AbortMode.FIN)
    return PortStatus.ACCEPTED


def probe_sni_pair(host: str, port: int, sni_a: str, sni_b: str,
                   timeout: float = DEFAULT_TIMEOUT, abort_mode: AbortMode | str = AbortMode.FIN,
                   network: Network | None = None) -> tuple[ProbeSample, ProbeSample]:
    """Two handshakes to one endpoint that differ only in the SNI they carry."""
    if sni_a == sni_b:
        raise ValueError("the two SNI values must differ")
    for name in (sni_a, sni_b):
        if not codec.is_valid_hostname(name):
            raise ValueError(f"invalid host name: {name!r}")
    target = TargetSpec(host, port, label=f"{host}:{port}")
    first = probe_handshake(target, codec.ClientHelloConfig(sni=sni_a), timeout, abort_mode, network)
    second = probe_handshake(target, codec.ClientHelloConfig(sni=sni_b), timeout, abort_mode, network)
    return first, second
