"""Minimal TLS framing: enough to send a ClientHello and recognize a Certificate.

Nothing here performs cryptography. The prober stops reading as soon as the
Certificate message is complete, so only the record layer and the handshake
framing of TLS 1.0-1.2 are modelled.
"""

from __future__ import annotations

import enum
import hashlib
import os
import re
import struct
import time
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field

MAX_RECORD_PAYLOAD = 2**14
RECORD_HEADER_LEN = 5
HANDSHAKE_HEADER_LEN = 4

TLS1_0 = (3, 1)
TLS1_2 = (3, 3)

# Broadly accepted TLS 1.2 suites, strongest first.
DEFAULT_CIPHER_SUITES: tuple[int, ...] = (
    0xC02F,  # ECDHE-RSA-AES128-GCM-SHA256
    0xC030,  # ECDHE-RSA-AES256-GCM-SHA384
    0xC02B,  # ECDHE-ECDSA-AES128-GCM-SHA256
    0xC02C,  # ECDHE-ECDSA-AES256-GCM-SHA384
    0xCCA8,  # ECDHE-RSA-CHACHA20-POLY1305
    0xCCA9,  # ECDHE-ECDSA-CHACHA20-POLY1305
    0xC013,  # ECDHE-RSA-AES128-SHA
    0xC014,  # ECDHE-RSA-AES256-SHA
    0x009C,  # RSA-AES128-GCM-SHA256
    0x009D,  # RSA-AES256-GCM-SHA384
    0x002F,  # RSA-AES128-SHA
    0x0035,  # RSA-AES256-SHA
)

_EXT_SERVER_NAME = 0x0000
_EXT_SUPPORTED_GROUPS = 0x000A
_EXT_EC_POINT_FORMATS = 0x000B
_EXT_SIGNATURE_ALGORITHMS = 0x000D
_EXT_RENEGOTIATION_INFO = 0xFF01

_GROUPS = (0x001D, 0x0017, 0x0018)
_SIGNATURE_ALGORITHMS = (
    0x0403, 0x0804, 0x0401, 0x0503, 0x0805, 0x0501, 0x0806, 0x0601, 0x0807, 0x0201,
)

_LABEL_RE = re.compile(r"^[A-Za-z0-9_](?:[A-Za-z0-9_-]{0,61}[A-Za-z0-9_])?$")


class TlsError(ValueError):
    """Base class for codec failures."""


class InvalidConfig(TlsError):
    pass


class MalformedRecord(TlsError):
    pass


class MalformedHandshake(TlsError):
    pass


class MalformedCertificateList(TlsError):
    pass


class ContentType(enum.IntEnum):
    CHANGE_CIPHER_SPEC = 20
    ALERT = 21
    HANDSHAKE = 22
    APPLICATION_DATA = 23


class HandshakeType(enum.IntEnum):
    CLIENT_HELLO = 1
    SERVER_HELLO = 2
    CERTIFICATE = 11
    SERVER_HELLO_DONE = 14


def _known(enum_cls, value: int):
    """Map *value* onto *enum_cls* if it names a member, else keep the raw int."""
    try:
        return enum_cls(value)
    except ValueError:
        return value


def is_valid_hostname(name: str) -> bool:
    if not name or len(name) > 255 or "\x00" in name:
        return False
    try:
        name.encode("ascii")
    except UnicodeEncodeError:
        return False
    return all(_LABEL_RE.match(label) for label in name.split("."))


@dataclass(frozen=True)
class ClientHelloConfig:
    max_version: tuple[int, int] = TLS1_2
    sni: str | None = None
    cipher_suite_ids: tuple[int, ...] = DEFAULT_CIPHER_SUITES
    session_id: bytes = b""
    client_random: bytes = field(default_factory=lambda: os.urandom(32))

    def __post_init__(self) -> None:
        object.__setattr__(self, "cipher_suite_ids", tuple(self.cipher_suite_ids))
        if self.sni is not None and not is_valid_hostname(self.sni):
            raise InvalidConfig(f"invalid SNI host name: {self.sni!r}")
        if not self.cipher_suite_ids:
            raise InvalidConfig("cipher_suite_ids must not be empty")
        if any(not 0 <= c <= 0xFFFF for c in self.cipher_suite_ids):
            raise InvalidConfig("cipher suite ids are 16-bit values")
        if len(self.client_random) != 32:
            raise InvalidConfig("client_random must be exactly 32 bytes")
        if len(self.session_id) > 32:
            raise InvalidConfig("session_id is at most 32 bytes")
        major, minor = self.max_version
        if not (0 <= major <= 255 and 0 <= minor <= 255):
            raise InvalidConfig(f"bad protocol version {self.max_version!r}")


@dataclass(frozen=True)
class TlsRecord:
    content_type: ContentType | int
    version: tuple[int, int]
    payload: bytes

    def serialize(self) -> bytes:
        if len(self.payload) > MAX_RECORD_PAYLOAD:
            raise MalformedRecord("record payload exceeds 2^14 bytes")
        return (
            struct.pack(">BBBH", int(self.content_type), *self.version, len(self.payload))
            + self.payload
        )


@dataclass(frozen=True)
class HandshakeMessage:
    msg_type: HandshakeType | int
    body: bytes

    def serialize(self) -> bytes:
        n = len(self.body)
        return struct.pack(">B", int(self.msg_type)) + n.to_bytes(3, "big") + self.body


@dataclass(frozen=True)
class CertificateInfo:
    leaf_der: bytes
    chain_length: int
    leaf_digest: str
    received_at: float


def certificate_digest(der: bytes) -> str:
    return hashlib.sha256(der).hexdigest()


# -- building -----------------------------------------------------------------

def _vec8(data: bytes) -> bytes:
    return struct.pack(">B", len(data)) + data


def _vec16(data: bytes) -> bytes:
    return struct.pack(">H", len(data)) + data


def _vec24(data: bytes) -> bytes:
    return len(data).to_bytes(3, "big") + data


def _ext(ext_type: int, data: bytes) -> bytes:
    return struct.pack(">H", ext_type) + _vec16(data)


def _u16_list(values: Iterable[int]) -> bytes:
    return b"".join(struct.pack(">H", v) for v in values)


def fragment(content_type: ContentType, payload: bytes,
             version: tuple[int, int] = TLS1_2) -> bytes:
    """Wrap *payload* into as many records as the 2^14 limit requires."""
    out = []
    for off in range(0, max(len(payload), 1), MAX_RECORD_PAYLOAD):
        out.append(TlsRecord(content_type, version, payload[off:off + MAX_RECORD_PAYLOAD]).serialize())
    return b"".join(out)


def build_client_hello(config: ClientHelloConfig) -> bytes:
    """Serialize *config* as a single handshake record.

    The record-layer version is TLS 1.0 (0x0301), which is what mainstream
    clients send for maximum compatibility; the offered maximum goes in the
    ClientHello body.
    """
    extensions = []
    if config.sni is not None:
        host = config.sni.encode("ascii")
        entry = b"\x00" + _vec16(host)
        extensions.append(_ext(_EXT_SERVER_NAME, _vec16(entry)))
    extensions.append(_ext(_EXT_SUPPORTED_GROUPS, _vec16(_u16_list(_GROUPS))))
    extensions.append(_ext(_EXT_EC_POINT_FORMATS, _vec8(b"\x00")))
    extensions.append(_ext(_EXT_SIGNATURE_ALGORITHMS, _vec16(_u16_list(_SIGNATURE_ALGORITHMS))))
    extensions.append(_ext(_EXT_RENEGOTIATION_INFO, b"\x00"))

    body = (
        bytes(config.max_version)
        + config.client_random
        + _vec8(config.session_id)
        + _vec16(_u16_list(config.cipher_suite_ids))
        + _vec8(b"\x00")  # null compression only
        + _vec16(b"".join(extensions))
    )
    msg = HandshakeMessage(HandshakeType.CLIENT_HELLO, body).serialize()
    return fragment(ContentType.HANDSHAKE, msg, TLS1_0)


def build_server_hello(version: tuple[int, int] = TLS1_2, cipher_suite: int = 0xC02F,
                       server_random: bytes | None = None, session_id: bytes = b"") -> bytes:
    """Return a serialized ServerHello handshake message (no record header)."""
    if server_random is None:
        server_random = os.urandom(32)
    body = (
        bytes(version) + server_random + _vec8(session_id)
        + struct.pack(">H", cipher_suite) + b"\x00"
        + _vec16(_ext(_EXT_RENEGOTIATION_INFO, b"\x00"))
    )
    return HandshakeMessage(HandshakeType.SERVER_HELLO, body).serialize()


def build_certificate_message(certs: Sequence[bytes]) -> bytes:
    entries = b"".join(_vec24(c) for c in certs)
    return HandshakeMessage(HandshakeType.CERTIFICATE, _vec24(entries)).serialize()


def build_certificate_flight(certs: Sequence[bytes], version: tuple[int, int] = TLS1_2,
                             cipher_suite: int = 0xC02F,
                             server_random: bytes | None = None) -> bytes:
    """ServerHello, Certificate and ServerHelloDone, each in its own record(s)."""
    if not certs:
        raise ValueError("certificate chain must not be empty")
    messages = (
        build_server_hello(version, cipher_suite, server_random),
        build_certificate_message(certs),
        HandshakeMessage(HandshakeType.SERVER_HELLO_DONE, b"").serialize(),
    )
    return b"".join(fragment(ContentType.HANDSHAKE, m, version) for m in messages)


class AlertDescription(enum.IntEnum):
    CLOSE_NOTIFY = 0
    HANDSHAKE_FAILURE = 40
    PROTOCOL_VERSION = 70
    INTERNAL_ERROR = 80
    UNRECOGNIZED_NAME = 112


def build_alert(description: int, fatal: bool = True,
                version: tuple[int, int] = TLS1_2) -> bytes:
    return TlsRecord(ContentType.ALERT, version, bytes([2 if fatal else 1, description])).serialize()


# -- parsing ------------------------------------------------------------------

def parse_record(buffer: bytes) -> tuple[TlsRecord, bytes] | None:
    """Split one record off the front of *buffer*.

    Returns ``(record, remaining)``, or ``None`` when *buffer* does not yet hold
    the whole record.
    """
    if len(buffer) < RECORD_HEADER_LEN:
        return None
    ctype, major, minor, length = struct.unpack_from(">BBBH", buffer)
    if major != 3:
        raise MalformedRecord(f"unexpected record version {major}.{minor}")
    if length > MAX_RECORD_PAYLOAD:
        raise MalformedRecord(f"declared record length {length} exceeds 2^14")
    end = RECORD_HEADER_LEN + length
    if len(buffer) < end:
        return None
    record = TlsRecord(_known(ContentType, ctype), (major, minor), bytes(buffer[RECORD_HEADER_LEN:end]))
    return record, bytes(buffer[end:])


def iter_records(buffer: bytes) -> Iterator[TlsRecord]:
    """Yield every complete record in *buffer*; trailing partial data is an error."""
    while buffer:
        parsed = parse_record(buffer)
        if parsed is None:
            raise MalformedRecord("truncated record at end of input")
        record, buffer = parsed
        yield record


class HandshakeReassembler:
    """Incrementally rebuild handshake messages from record payloads.

    Messages may span records and a record may carry several messages.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buf)

    def feed(self, payload: bytes) -> list[HandshakeMessage]:
        self._buf += payload
        out = []
        while len(self._buf) >= HANDSHAKE_HEADER_LEN:
            length = int.from_bytes(self._buf[1:4], "big")
            end = HANDSHAKE_HEADER_LEN + length
            if len(self._buf) < end:
                break
            out.append(HandshakeMessage(_known(HandshakeType, self._buf[0]),
                                        bytes(self._buf[HANDSHAKE_HEADER_LEN:end])))
            del self._buf[:end]
        return out

    def close(self) -> None:
        if self._buf:
            raise MalformedHandshake(
                f"{len(self._buf)} bytes of an incomplete handshake message at end of input")


def extract_handshake_messages(records: Iterable[TlsRecord]) -> list[HandshakeMessage]:
    asm = HandshakeReassembler()
    messages = []
    for record in records:
        if record.content_type != ContentType.HANDSHAKE:
            raise MalformedHandshake(f"non-handshake record (type {int(record.content_type)})")
        messages.extend(asm.feed(record.payload))
    asm.close()
    return messages


def parse_certificate_message(msg: HandshakeMessage,
                              received_at: float | None = None) -> CertificateInfo:
    if msg.msg_type != HandshakeType.CERTIFICATE:
        raise MalformedCertificateList(f"not a Certificate message (type {int(msg.msg_type)})")
    body = msg.body
    if len(body) < 3:
        raise MalformedCertificateList("certificate list length missing")
    total = int.from_bytes(body[:3], "big")
    if total != len(body) - 3:
        raise MalformedCertificateList(
            f"certificate list length {total} does not match body ({len(body) - 3})")
    entries = []
    pos, end = 3, 3 + total
    while pos < end:
        if end - pos < 3:
            raise MalformedCertificateList("truncated certificate entry header")
        n = int.from_bytes(body[pos:pos + 3], "big")
        pos += 3
        if n == 0 or pos + n > end:
            raise MalformedCertificateList(f"certificate entry length {n} exceeds list")
        entries.append(body[pos:pos + n])
        pos += n
    if not entries:
        raise MalformedCertificateList("empty certificate list")
    return CertificateInfo(
        leaf_der=entries[0],
        chain_length=len(entries),
        leaf_digest=certificate_digest(entries[0]),
        received_at=time.monotonic() if received_at is None else received_at,
    )


def certificate_chain(msg: HandshakeMessage) -> list[bytes]:
    """All DER entries of a Certificate message, leaf first."""
    parse_certificate_message(msg)  # validates framing
    body, out, pos = msg.body, [], 3
    while pos < len(body):
        n = int.from_bytes(body[pos:pos + 3], "big")
        out.append(body[pos + 3:pos + 3 + n])
        pos += 3 + n
    return out


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedHandshake("ClientHello truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def vec8(self) -> bytes:
        return self.take(self.u8())

    def vec16(self) -> bytes:
        return self.take(self.u16())

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _server_name(ext_data: bytes) -> str | None:
    r = _Reader(ext_data)
    names = _Reader(r.vec16())
    while names.remaining:
        name_type = names.u8()
        name = names.vec16()
        if name_type == 0:
            return name.decode("ascii", errors="replace")
    return None


def parse_client_hello(data: bytes) -> ClientHelloConfig:
    """Parse a ClientHello given either full record bytes or a bare handshake message."""
    if data[:1] == bytes([ContentType.HANDSHAKE]):
        messages = extract_handshake_messages(iter_records(data))
        if not messages:
            raise MalformedHandshake("no handshake message")
        msg = messages[0]
    else:
        asm = HandshakeReassembler()
        found = asm.feed(data)
        asm.close()
        msg = found[0]
    if msg.msg_type != HandshakeType.CLIENT_HELLO:
        raise MalformedHandshake(f"expected ClientHello, got type {int(msg.msg_type)}")

    r = _Reader(msg.body)
    version = (r.u8(), r.u8())
    client_random = r.take(32)
    session_id = r.vec8()
    suites_raw = r.vec16()
    if len(suites_raw) % 2:
        raise MalformedHandshake("odd cipher suite vector length")
    suites = tuple(struct.unpack(f">{len(suites_raw) // 2}H", suites_raw))
    r.vec8()  # compression methods
    sni = None
    if r.remaining:
        exts = _Reader(r.vec16())
        while exts.remaining:
            ext_type = exts.u16()
            ext_data = exts.vec16()
            if ext_type == _EXT_SERVER_NAME:
                sni = _server_name(ext_data)
    return ClientHelloConfig(max_version=version, sni=sni, cipher_suite_ids=suites,
                             session_id=session_id, client_random=client_random)


def server_hello_version(msg: HandshakeMessage) -> tuple[int, int]:
    if msg.msg_type != HandshakeType.SERVER_HELLO or len(msg.body) < 2:
        raise MalformedHandshake("not a ServerHello")
    return msg.body[0], msg.body[1]
