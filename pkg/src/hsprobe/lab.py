"""Loopback testbed: a genuine server, an optional interceptor, emulated distance.

The genuine responder sits ``upstream_one_way_ms`` away from the victim. With a
simulator on the path, the victim is ``lan_one_way_ms`` from the attacker and
the attacker pays the upstream distance itself when it talks to the server.
"""

from __future__ import annotations

import socket
from collections.abc import Sequence
from dataclasses import dataclass, field

from .analysis import DetectionInputs, DetectionReport, DetectorConfig, compute_profile, evaluate_all
from .certs import self_signed_certificate
from .netem import EmulatedNetwork
from .prober import (PortStatus, ProbeSample, SamplingSchedule, TargetSpec, probe_closed_port,
                     probe_handshake, probe_sni_pair, run_session)
from .responder import ResponderConfig, ResponderHandle, run_responder
from .sim import SimConfig, SimHandle, SimMode, run_sim

GENUINE_NAME = "genuine.example"
OTHER_NAME = "other.example"


def free_port(host: str = "127.0.0.1") -> int:
    """A port with nothing listening on it (at the time of the call)."""
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def genuine_chain() -> list[bytes]:
    return [self_signed_certificate(GENUINE_NAME, "genuine"),
            self_signed_certificate("Genuine Test CA", "ca")]


def static_chain() -> list[bytes]:
    return [self_signed_certificate("static.webmitm.example", "static")]


@dataclass
class Testbed:
    responder: ResponderHandle
    network: EmulatedNetwork
    closed_port: int
    sim: SimHandle | None = None
    _stopped: bool = field(default=False, repr=False)

    def route(self, upstream: tuple[str, int]) -> tuple[str, int]:
        return self.sim.address_for(upstream) if self.sim else upstream

    @property
    def target(self) -> TargetSpec:
        host, port = self.route(self.responder.address)
        return TargetSpec(host, port, sni=GENUINE_NAME, label=GENUINE_NAME)

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        if self.sim:
            self.sim.stop()
        self.responder.stop()

    def __enter__(self) -> Testbed:
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def start_testbed(mode: SimMode | str | None = None, *, responder_delay_ms: float = 10.0,
                  upstream_one_way_ms: float = 25.0, lan_one_way_ms: float = 1.0,
                  cert_gen_delay_ms: float = 150.0, seed: int = 0, **sim_options) -> Testbed:
    """Start a strict genuine responder and, if *mode* is given, a simulator in front."""
    responder = run_responder(ResponderConfig(genuine_chain(), processing_delay_ms=responder_delay_ms,
                                              strict_names=(GENUINE_NAME,)))
    closed = ("127.0.0.1", free_port())
    network = EmulatedNetwork()
    for upstream in (responder.address, closed):
        network.set_path(upstream, upstream_one_way_ms)
    sim = None
    if mode is not None:
        mode = SimMode(mode)
        if mode is SimMode.WEBMITM:
            sim_options.setdefault("static_cert", static_chain())
        try:
            sim = run_sim(SimConfig(mode, upstream_addr=responder.address, extra_upstreams=(closed,),
                                    cert_gen_delay_ms=cert_gen_delay_ms,
                                    upstream_extra_delay_ms=upstream_one_way_ms, seed=seed,
                                    **sim_options))
        except Exception:
            responder.stop()
            raise
        for upstream in (responder.address, closed):
            addr = sim.address_for(upstream)
            if addr != upstream:
                network.set_path(addr, sim.client_path(upstream, lan_one_way_ms))
    return Testbed(responder, network, closed[1], sim)


@dataclass(frozen=True)
class MatrixRun:
    report: DetectionReport
    fingerprint_run: Sequence[ProbeSample]
    closed_port_status: PortStatus
    sni_pair: tuple[ProbeSample, ProbeSample]
    session: Sequence[ProbeSample]


def run_indicator_matrix(bed: Testbed, *, fingerprint_probes: int = 3,
                         schedule: SamplingSchedule = SamplingSchedule(5, 0.0, 5),
                         timeout: float = 5.0, cfg: DetectorConfig = DetectorConfig()) -> MatrixRun:
    """Collect every per-target indicator against *bed* and evaluate them.

    Order matters for a passive-first attacker: the repeated fingerprint run
    comes first so that its first connection is the one relayed.
    """
    net = bed.network
    target = bed.target
    fingerprints = [probe_handshake(target, timeout=timeout, network=net) for _ in range(fingerprint_probes)]
    closed_host, closed_port = bed.route(("127.0.0.1", bed.closed_port))
    closed_status = probe_closed_port(closed_host, closed_port, timeout=timeout, network=net)
    pair = probe_sni_pair(target.host, target.port, GENUINE_NAME, OTHER_NAME, timeout=timeout, network=net)
    rtt, samples = run_session(target, schedule, timeout=timeout, network=net)
    inputs = DetectionInputs(
        profile=compute_profile(samples, rtt, target.label),
        fingerprint_history=[s.cert for s in fingerprints if s.cert is not None],
        sni_pair=pair,
        closed_ports={bed.closed_port: closed_status},
    )
    return MatrixRun(evaluate_all(inputs, cfg), fingerprints, closed_status, pair, samples)
