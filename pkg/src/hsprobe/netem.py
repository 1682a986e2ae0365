"""Connection factories, including a user-space path-latency emulator.

On loopback every TCP handshake completes in microseconds and the kernel
answers the SYN before any user-space code runs, so a listener cannot make a
client's ``connect()`` slow. Distance is therefore emulated on the dialing
side: :class:`EmulatedNetwork` adds one round trip to the connect and one
round trip to every request/response turn for the destinations it knows.
"""

from __future__ import annotations

import socket
import time
from collections.abc import Callable, Mapping
from typing import Protocol, Union

Address = tuple[str, int]
# One-way latency in ms, a (connect_ms, data_ms) pair when the TCP handshake
# and the data travel different distances, or a callable returning either;
# callables are evaluated at connect time.
PathLatency = Union[float, tuple[float, float]]
Latency = Union[PathLatency, Callable[[], PathLatency]]


class Network(Protocol):
    def connect(self, address: Address, timeout: float) -> socket.socket: ...


class DirectNetwork:
    """Plain sockets; the real network supplies all latency."""

    def connect(self, address: Address, timeout: float) -> socket.socket:
        sock = socket.create_connection(address, timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock


class DelayedSocket:
    """Socket wrapper adding a one-way delay in each direction of a turn.

    A turn is a write followed by reads: ``sendall`` waits one one-way delay
    before transmitting, and the first data that arrives after a write is held
    back by another one-way delay before being handed to the caller.
    """

    def __init__(self, sock: socket.socket, one_way_ms: float) -> None:
        self._sock = sock
        self._delay = one_way_ms / 1000.0
        self._turn_open = False

    def sendall(self, data: bytes) -> None:
        if self._delay:
            time.sleep(self._delay)
        self._sock.sendall(data)
        self._turn_open = True

    def recv(self, bufsize: int) -> bytes:
        data = self._sock.recv(bufsize)
        if data and self._turn_open:
            self._turn_open = False
            if self._delay:
                time.sleep(self._delay)
        return data

    def __getattr__(self, name):
        return getattr(self._sock, name)


class EmulatedNetwork:
    """Dial through emulated paths.

    *paths* maps destination addresses to one-way latency in milliseconds;
    destinations not listed use *default_ms*. A callable latency is evaluated
    on every connect, which lets a path change while a test runs.
    """

    def __init__(self, paths: Mapping[Address, Latency] | None = None, default_ms: float = 0.0) -> None:
        self.paths: dict[Address, Latency] = dict(paths or {})
        self.default_ms = default_ms

    def set_path(self, address: Address, latency: Latency) -> None:
        self.paths[address] = latency

    def latency_ms(self, address: Address) -> tuple[float, float]:
        """``(connect, data)`` one-way latency currently in effect for *address*."""
        latency = self.paths.get(address, self.default_ms)
        if callable(latency):
            latency = latency()
        if isinstance(latency, tuple):
            return float(latency[0]), float(latency[1])
        return float(latency), float(latency)

    def connect(self, address: Address, timeout: float) -> socket.socket:
        connect_one_way, one_way = self.latency_ms(address)
        start = time.monotonic()
        sock = DirectNetwork().connect(address, timeout)
        remaining = start + 2 * connect_one_way / 1000.0 - time.monotonic()
        if remaining > 0:
            if remaining > timeout:
                sock.close()
                raise socket.timeout("emulated connect exceeded timeout")
            time.sleep(remaining)
        return DelayedSocket(sock, one_way) if one_way else sock
