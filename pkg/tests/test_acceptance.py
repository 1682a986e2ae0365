"""Acceptance criteria, one marked group per criterion.

A summary line per criterion is printed at the end of the run (see
``conftest.pytest_terminal_summary``). Paths are emulated on the client side:
a direct path with round trip R is one-way R/2; a simulator on the path is
1 ms one-way from the prober and pays the upstream distance itself.
"""

import json
import statistics
import subprocess
import sys
import time

import pytest

import test_analysis
import test_store
import test_tls_codec
from hsprobe import analysis, lab
from hsprobe.certs import common_name, forge_certificate
from hsprobe.lab import GENUINE_NAME, OTHER_NAME, run_indicator_matrix, start_testbed
from hsprobe.netem import EmulatedNetwork
from hsprobe.prober import (Outcome, PortStatus, SamplingSchedule, TargetSpec, probe_closed_port,
                            probe_handshake, probe_sni_pair, run_session)
from hsprobe.responder import ResponderConfig, run_responder
from hsprobe.sim import SimConfig, SimMode, run_sim
from hsprobe.tls_codec import certificate_digest

from conftest import LAN_ONE_WAY_MS, LOOPBACK

FIVE = SamplingSchedule(5, 0.0, 5)
SLACK_MS = 25.0


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def session_profile(bed, schedule=FIVE):
    rtt, samples = run_session(bed.target, schedule, timeout=5, network=bed.network)
    assert all(s.ok for s in samples), [s.detail for s in samples]
    return analysis.compute_profile(samples, rtt, bed.target.label), samples


# -- 1 --------------------------------------------------------------------------

@criterion(1, "timing shift through ettercap")
def test_c1_timing_shift_through_ettercap():
    start = time.monotonic()
    with start_testbed("ettercap", responder_delay_ms=10, upstream_one_way_ms=25,
                       cert_gen_delay_ms=150) as bed:
        profile, _ = session_profile(bed)
    ind = analysis.detect_timing_shift(profile)
    expected = 150 + 2 * 25 + 10
    print(f"C1 via sim: rtt={profile.rtt_mean_ms:.2f} ms cert={profile.cert_time_mean_ms:.1f} ms "
          f"ratio={ind.evidence['ratio']:.1f}")
    assert profile.rtt_mean_ms <= 5
    assert 200 <= profile.cert_time_mean_ms <= expected + SLACK_MS
    assert ind.evidence["ratio"] >= 10
    assert ind.fired
    assert time.monotonic() - start < 60


@criterion(1, "timing shift through ettercap")
def test_c1_direct_probe_quiet():
    with start_testbed(None, responder_delay_ms=10, upstream_one_way_ms=25) as bed:
        profile, _ = session_profile(bed)
    ind = analysis.detect_timing_shift(profile)
    print(f"C1 direct: rtt={profile.rtt_mean_ms:.2f} ms cert={profile.cert_time_mean_ms:.1f} ms "
          f"ratio={ind.evidence['ratio']:.2f}")
    assert 50 <= profile.rtt_mean_ms <= 50 + SLACK_MS
    assert ind.evidence["ratio"] < 10
    assert not ind.fired


# -- 2 --------------------------------------------------------------------------

@criterion(2, "delay moves from RTT to certificate time")
def test_c2_rtt_shift_to_cert():
    start = time.monotonic()
    with start_testbed(None, upstream_one_way_ms=50) as bed:
        direct, _ = session_profile(bed)
    with start_testbed("ettercap", upstream_one_way_ms=50, cert_gen_delay_ms=150) as bed:
        via_sim, _ = session_profile(bed)
    ind = analysis.detect_baseline_shift(via_sim, direct)
    print(f"C2 direct rtt={direct.rtt_mean_ms:.1f} cert={direct.cert_time_mean_ms:.1f}; "
          f"via sim rtt={via_sim.rtt_mean_ms:.2f} cert={via_sim.cert_time_mean_ms:.1f}")
    assert 100 <= direct.rtt_mean_ms <= 125
    assert via_sim.rtt_mean_ms <= 5
    assert via_sim.cert_time_mean_ms >= 150 + 2 * 25
    assert ind.fired
    assert time.monotonic() - start < 60


# -- 3 --------------------------------------------------------------------------

@criterion(3, "RTT variance collapse across targets")
def test_c3_variance_collapse(genuine_chain):
    start = time.monotonic()
    round_trips = (20, 90, 250)
    responders = [run_responder(ResponderConfig(genuine_chain)) for _ in round_trips]
    try:
        net = EmulatedNetwork({r.address: rt / 2 for r, rt in zip(responders, round_trips)})
        direct = []
        for r in responders:
            rtt, samples = run_session(TargetSpec(*r.address), FIVE, timeout=5, network=net)
            direct.append(analysis.compute_profile(samples, rtt, f"t{r.port}"))
        with run_sim(SimConfig(SimMode.ETTERCAP, upstream_addr=responders[0].address,
                               extra_upstreams=tuple(r.address for r in responders[1:]))) as sim:
            for r in responders:
                net.set_path(sim.address_for(r.address), sim.client_path(r.address, LAN_ONE_WAY_MS))
            via_sim = []
            for r in responders:
                rtt, samples = run_session(TargetSpec(*sim.address_for(r.address)), FIVE, timeout=5,
                                           network=net)
                via_sim.append(analysis.compute_profile(samples, rtt, f"t{r.port}"))
    finally:
        for r in responders:
            r.stop()
    quiet = analysis.detect_variance_collapse(direct)
    loud = analysis.detect_variance_collapse(via_sim)
    print(f"C3 direct cv={quiet.evidence['cv']:.3f}; via sim cv={loud.evidence['cv']:.3f}")
    assert quiet.evidence["cv"] >= 0.25 and not quiet.fired
    assert loud.evidence["cv"] < 0.25 and loud.fired
    assert time.monotonic() - start < 90


# -- 4 --------------------------------------------------------------------------

@criterion(4, "cain relays first, then impersonates")
def test_c4_cain_sequence():
    upstream_ms = 100
    with start_testbed("cain", upstream_one_way_ms=upstream_ms, cert_gen_delay_ms=150) as bed:
        samples = [probe_handshake(bed.target, timeout=5, network=bed.network) for _ in range(3)]
    genuine_leaf = lab.genuine_chain()[0]
    genuine = certificate_digest(genuine_leaf)
    forged = certificate_digest(forge_certificate(common_name(genuine_leaf))[0])
    digests = [s.cert.leaf_digest for s in samples]
    print(f"C4 connect ms: {[round(s.tcp_connect_ms, 1) for s in samples]}")
    assert digests == [genuine, forged, forged]
    ind = analysis.detect_fingerprint_change([s.cert for s in samples])
    assert ind.fired
    # Index of the first changed observation in 0-based order; sample 2 in 1-based terms.
    assert ind.evidence["index"] + 1 == 2
    assert samples[0].tcp_connect_ms >= upstream_ms
    assert samples[1].tcp_connect_ms < 5


# -- 5 --------------------------------------------------------------------------

@criterion(5, "webmitm serves one certificate for every name")
def test_c5_webmitm_static_certificate():
    with start_testbed("webmitm") as bed:
        pair = probe_sni_pair(bed.target.host, bed.target.port, GENUINE_NAME, OTHER_NAME,
                              timeout=5, network=bed.network)
        rtt, samples = run_session(bed.target, FIVE, timeout=5, network=bed.network)
    assert pair[0].cert.leaf_digest == pair[1].cert.leaf_digest
    assert analysis.detect_sni_mismatch(pair).fired
    cert_times = analysis.cert_times_ms(samples, rtt.mean_ms)
    print(f"C5 cert time stdev={statistics.stdev(cert_times):.3f} ms")
    assert len(cert_times) == 5
    assert statistics.stdev(cert_times) <= 10


# -- 6 --------------------------------------------------------------------------

@criterion(6, "closed port accepted only through ettercap")
def test_c6_closed_port():
    with start_testbed("ettercap") as bed:
        closed = (LOOPBACK, bed.closed_port)
        routed = bed.route(closed)
        assert probe_closed_port(*routed, timeout=3, network=bed.network) is PortStatus.ACCEPTED
        s = probe_handshake(TargetSpec(*routed), timeout=5, network=bed.network)
        assert s.outcome is Outcome.RESET_DURING_HANDSHAKE
        assert probe_closed_port(*closed, timeout=3) is PortStatus.REFUSED
        via = subprocess.run([sys.executable, "-m", "hsprobe", "portcheck", routed[0], str(routed[1])],
                             capture_output=True, text=True, timeout=30)
        direct = subprocess.run([sys.executable, "-m", "hsprobe", "portcheck", *map(str, closed)],
                                capture_output=True, text=True, timeout=30)
    print(f"C6 portcheck exits: via sim {via.returncode}, direct {direct.returncode}")
    assert (via.returncode, direct.returncode) == (2, 0)


# -- 7 --------------------------------------------------------------------------

def _cli_probe(address, *flags):
    start = time.monotonic()
    proc = subprocess.run([sys.executable, "-m", "hsprobe", "probe", "--target", f"{address[0]}:{address[1]}",
                           *flags], capture_output=True, text=True, timeout=600)
    return json.loads(proc.stdout), time.monotonic() - start


@criterion(7, "sampling schedule")
def test_c7_compressed_schedule(responder):
    h = responder()
    doc, wall = _cli_probe(h.address, "--samples", "19", "--duration-s", "19")
    print(f"C7 compressed: {len(doc['targets'][0]['samples'])} samples in {wall:.1f} s")
    assert len(doc["targets"][0]["samples"]) == 19
    assert wall < 25


@pytest.mark.slow
@criterion(7, "sampling schedule")
def test_c7_full_schedule(responder):
    h = responder()
    doc, wall = _cli_probe(h.address, "--paper-schedule")
    print(f"C7 --paper-schedule: {len(doc['targets'][0]['samples'])} samples in {wall:.1f} s")
    assert len(doc["targets"][0]["samples"]) == 19
    assert 284 <= wall <= 330


# -- 8 --------------------------------------------------------------------------

@criterion(8, "property suites")
@pytest.mark.parametrize("prop", [
    test_tls_codec.test_client_hello_round_trip,
    test_tls_codec.test_fragmentation_invariance,
    test_analysis.test_statistics_match_brute_force,
    test_analysis.test_raising_shift_ratio_never_fires_more,
    test_analysis.test_indicators_are_deterministic,
    test_analysis.test_verdict_is_disjunction,
], ids=lambda f: f.__name__.removeprefix("test_"))
def test_c8_properties(prop):
    prop()


@criterion(8, "property suites")
def test_c8_property_case_counts():
    for prop in (test_tls_codec.test_client_hello_round_trip, test_tls_codec.test_fragmentation_invariance):
        assert prop._hypothesis_internal_use_settings.max_examples >= 1000


@criterion(8, "property suites")
def test_c8_store_round_trip(tmp_path_factory):
    test_store.test_round_trip_field_for_field(tmp_path_factory=tmp_path_factory)


@criterion(8, "property suites")
def test_c8_store_truncation(tmp_path):
    test_store.test_truncation_at_every_byte_loses_only_the_torn_record(tmp_path)


@criterion(8, "property suites")
@pytest.mark.parametrize("mode,expected", [
    ("ettercap", {"timing_shift", "closed_port_accept"}),
    ("webmitm", {"sni_mismatch"}),
    ("cain", {"fingerprint_change", "timing_shift"}),
])
def test_c8_mode_exclusive_indicator_sets(mode, expected):
    with start_testbed(mode) as bed:
        run = run_indicator_matrix(bed)
    assert {k.value for k in run.report.fired_kinds} == expected
