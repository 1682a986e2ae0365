"""Detect TLS interception from handshake timing and active behavioral probes."""

__version__ = "0.1.0"
