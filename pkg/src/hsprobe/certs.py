"""Deterministic self-signed certificates for the responder and the simulator."""

from __future__ import annotations

import datetime as dt
import hashlib
import time

from cryptography import x509
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.x509.oid import NameOID

_NOT_BEFORE = dt.datetime(2020, 1, 1, tzinfo=dt.timezone.utc)
_NOT_AFTER = dt.datetime(2045, 1, 1, tzinfo=dt.timezone.utc)


def _key_for(common_name: str, seed: int | bytes | str) -> ed25519.Ed25519PrivateKey:
    material = hashlib.sha256(repr((common_name, seed)).encode()).digest()
    return ed25519.Ed25519PrivateKey.from_private_bytes(material)


def self_signed_certificate(common_name: str, seed: int | bytes | str = 0) -> bytes:
    """DER certificate with subject CN *common_name*.

    Ed25519 signatures are deterministic, so the same ``(common_name, seed)``
    always yields the same bytes.
    """
    key = _key_for(common_name, seed)
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    serial = int.from_bytes(hashlib.sha256(repr(("serial", common_name, seed)).encode()).digest()[:16], "big") >> 1
    builder = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(serial or 1)
        .not_valid_before(_NOT_BEFORE)
        .not_valid_after(_NOT_AFTER)
    )
    if "." in common_name or common_name.isalnum():
        try:
            builder = builder.add_extension(
                x509.SubjectAlternativeName([x509.DNSName(common_name)]), critical=False)
        except ValueError:
            pass
    cert = builder.sign(key, None)
    return cert.public_bytes(serialization.Encoding.DER)


def forge_certificate(identity: str, delay_ms: float = 0.0, seed: int | bytes | str = 0) -> list[bytes]:
    """Impersonate *identity*: a one-certificate chain whose subject CN is *identity*.

    The signing cost of a real interception tool is modelled by sleeping
    *delay_ms* before returning; the returned chain depends only on
    ``(identity, seed)``.
    """
    if not identity:
        raise ValueError("identity must be non-empty")
    deadline = time.monotonic() + delay_ms / 1000.0
    der = self_signed_certificate(identity, ("forged", seed))
    remaining = deadline - time.monotonic()
    if remaining > 0:
        time.sleep(remaining)
    return [der]


def common_name(der: bytes) -> str | None:
    """Subject common name of a DER certificate, or None when absent/unparseable."""
    try:
        cert = x509.load_der_x509_certificate(der)
        attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    except ValueError:
        return None
    return str(attrs[0].value) if attrs else None


def load_chain(path: str) -> list[bytes]:
    """Read a PEM bundle or a single DER certificate from *path*."""
    with open(path, "rb") as fh:
        data = fh.read()
    if b"-----BEGIN CERTIFICATE-----" in data:
        return [c.public_bytes(serialization.Encoding.DER)
                for c in x509.load_pem_x509_certificates(data)]
    x509.load_der_x509_certificate(data)
    return [data]
