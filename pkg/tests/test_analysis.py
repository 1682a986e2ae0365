import datetime as dt
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsprobe import analysis as an
from hsprobe.analysis import DetectionInputs, DetectorConfig, IndicatorKind, TimingProfile
from hsprobe.prober import Outcome, PortStatus, ProbeSample, RttEstimate
from hsprobe.tls_codec import CertificateInfo, certificate_digest

T0 = dt.datetime(2026, 1, 1, tzinfo=dt.timezone.utc)


def cert(tag: bytes, at: float = 0.0) -> CertificateInfo:
    return CertificateInfo(tag, 1, certificate_digest(tag), at)


def ok(hello_to_cert, tag=b"A", sni=None):
    return ProbeSample(T0, Outcome.OK, tcp_connect_ms=1.0, hello_to_cert_ms=hello_to_cert,
                       cert=cert(tag), negotiated_version=(3, 3), sni=sni)


def failed(outcome=Outcome.READ_TIMEOUT):
    return ProbeSample(T0, outcome, tcp_connect_ms=1.0)


def profile(label="t", rtt=10.0, cert_time=0.0, n=5, rtt_var=0.0):
    return TimingProfile(label, rtt, rtt_var, cert_time, 0.0, n, {})


def brute_stats(values):
    """Exact mean and population variance with rational arithmetic."""
    xs = [Fraction(v) for v in values]
    mean = sum(xs) / len(xs)
    var = sum((x - mean) ** 2 for x in xs) / len(xs)
    return float(mean), float(var)


# -- compute_profile -----------------------------------------------------------

def test_cert_time_subtracts_rtt():
    p = an.compute_profile([ok(110), ok(112), ok(114)], RttEstimate((100.0,)), "x")
    assert p.cert_time_mean_ms == pytest.approx(12.0)
    assert p.cert_time_variance == pytest.approx(8 / 3)
    assert p.ok_sample_count == 3 and p.total_samples == 3


def test_cert_time_floored_at_zero():
    p = an.compute_profile([ok(100.0)], RttEstimate((100.0,)), "x")
    assert p.cert_time_mean_ms == 0.0
    p = an.compute_profile([ok(90.0)], RttEstimate((100.0,)), "x")
    assert p.cert_time_mean_ms == 0.0


def test_all_failed_profile_is_flagged_not_raised():
    p = an.compute_profile([failed(), failed(Outcome.CONNECT_REFUSED)], RttEstimate((5.0,)), "x")
    assert p.ok_sample_count == 0 and not p.has_ok_samples
    assert p.failure_counts == {"connect_refused": 1, "read_timeout": 1}
    assert p.total_samples == 2


def test_profile_needs_samples():
    with pytest.raises(ValueError):
        an.compute_profile([], RttEstimate((1.0,)), "x")


@settings(max_examples=300)
@given(st.lists(st.floats(0.01, 1e4), min_size=1, max_size=20),
       st.lists(st.one_of(st.floats(0, 2e4), st.none()), min_size=1, max_size=30))
def test_statistics_match_brute_force(rtts, hellos):
    samples = [ok(h) if h is not None else failed() for h in hellos]
    rtt = RttEstimate(tuple(rtts))
    p = an.compute_profile(samples, rtt, "x")
    rtt_mean, rtt_var = brute_stats(rtts)
    assert math.isclose(p.rtt_mean_ms, rtt_mean, rel_tol=1e-9)
    assert math.isclose(p.rtt_variance, rtt_var, rel_tol=1e-9, abs_tol=1e-9 * rtt_mean ** 2)
    cert_times = [max(Fraction(h) - Fraction(rtt_mean), 0) for h in hellos if h is not None]
    assert p.ok_sample_count == len(cert_times)
    assert p.ok_sample_count + sum(p.failure_counts.values()) == len(samples)
    if cert_times:
        c_mean, c_var = brute_stats(cert_times)
        scale = max(c_mean, max(float(c) for c in cert_times), 1e-12)
        assert math.isclose(p.cert_time_mean_ms, c_mean, rel_tol=1e-9, abs_tol=1e-9 * scale)
        assert math.isclose(p.cert_time_variance, c_var, rel_tol=1e-9, abs_tol=1e-9 * scale ** 2)
    assert p.rtt_variance >= 0 and p.cert_time_variance >= 0 and p.cert_time_mean_ms >= 0


# -- timing shift --------------------------------------------------------------

def test_timing_shift_fires_at_order_of_magnitude():
    ind = an.detect_timing_shift(profile(rtt=3.0, cert_time=180.0))
    assert ind.fired and ind.evidence["ratio"] == pytest.approx(60.0)
    assert ind.thresholds["shift_ratio"] == 10.0


def test_timing_shift_quiet_when_rtt_dominates():
    assert not an.detect_timing_shift(profile(rtt=80.0, cert_time=40.0)).fired


def test_timing_shift_gated_on_sample_count():
    assert not an.detect_timing_shift(profile(rtt=3.0, cert_time=500.0, n=4)).fired


def test_timing_shift_zero_rtt_never_fires():
    assert not an.detect_timing_shift(profile(rtt=0.0, cert_time=500.0)).fired


@given(st.floats(0, 1e3), st.floats(0, 1e4), st.floats(0.1, 100), st.floats(0.1, 100))
def test_raising_shift_ratio_never_fires_more(rtt, cert_time, r1, r2):
    lo, hi = sorted((r1, r2))
    p = profile(rtt=rtt, cert_time=cert_time)
    if not an.detect_timing_shift(p, DetectorConfig(shift_ratio=lo)).fired:
        assert not an.detect_timing_shift(p, DetectorConfig(shift_ratio=hi)).fired


@given(st.floats(0, 1e3), st.floats(0, 1e4), st.integers(0, 10))
def test_indicators_are_deterministic(rtt, cert_time, n):
    p = profile(rtt=rtt, cert_time=cert_time, n=n)
    assert an.detect_timing_shift(p) == an.detect_timing_shift(p)
    base = profile(rtt=cert_time, cert_time=rtt)
    assert an.detect_baseline_shift(p, base) == an.detect_baseline_shift(p, base)


# -- variance collapse ---------------------------------------------------------

def brute_cv(values):
    mean, var = brute_stats(values)
    return math.sqrt(var) / mean


def test_variance_collapse_fires_for_uniform_rtts():
    profiles = [profile(f"t{i}", rtt=v) for i, v in enumerate((3.0, 3.1, 2.9))]
    ind = an.detect_variance_collapse(profiles)
    assert ind.evidence["cv"] == pytest.approx(brute_cv([3.0, 3.1, 2.9]))
    assert ind.evidence["cv"] == pytest.approx(0.0272, abs=1e-4)
    assert ind.fired
    assert ind.evidence["rtt_means_ms"] == {"t0": 3.0, "t1": 3.1, "t2": 2.9}


def test_variance_collapse_quiet_for_diverse_rtts():
    profiles = [profile(f"t{i}", rtt=v) for i, v in enumerate((20.0, 90.0, 250.0))]
    ind = an.detect_variance_collapse(profiles)
    # population CV; the sample-stddev variant would give ~0.98
    assert ind.evidence["cv"] == pytest.approx(brute_cv([20, 90, 250]))
    assert ind.evidence["cv"] == pytest.approx(0.802, abs=1e-3)
    assert not ind.fired


def test_variance_collapse_needs_three_targets():
    with pytest.raises(an.InsufficientTargets):
        an.detect_variance_collapse([profile("a"), profile("b")])


# -- fingerprint change --------------------------------------------------------

def test_fingerprint_change_fires_at_first_difference():
    history = [cert(b"A", 1.0), cert(b"A", 2.0), cert(b"B", 3.0)]
    ind = an.detect_fingerprint_change(history)
    assert ind.fired and ind.evidence["index"] == 2
    assert ind.evidence["previous_digest"] == certificate_digest(b"A")
    assert ind.evidence["new_digest"] == certificate_digest(b"B")
    assert ind.evidence["changed_at"] == 3.0


def test_fingerprint_stable():
    assert not an.detect_fingerprint_change([cert(b"A")] * 3).fired


def test_fingerprint_needs_two():
    with pytest.raises(an.InsufficientHistory):
        an.detect_fingerprint_change([cert(b"A")])


def test_fingerprint_accepts_stored_pairs():
    ind = an.detect_fingerprint_change([(T0, "aa"), (T0, "bb")])
    assert ind.fired and ind.evidence["changed_at"] == T0.isoformat()


# -- sni mismatch --------------------------------------------------------------

def test_sni_mismatch_same_certificate():
    ind = an.detect_sni_mismatch((ok(5, b"S", "a.example"), ok(5, b"S", "b.example")))
    assert ind.fired
    assert ind.evidence["shared_digest"] == certificate_digest(b"S")
    assert (ind.evidence["sni_a"], ind.evidence["sni_b"]) == ("a.example", "b.example")


def test_sni_mismatch_second_rejected():
    b = ProbeSample(T0, Outcome.PROTOCOL_ERROR, tcp_connect_ms=1.0, sni="b.example")
    assert not an.detect_sni_mismatch((ok(5, b"S", "a.example"), b)).fired


def test_sni_mismatch_distinct_certificates():
    assert not an.detect_sni_mismatch((ok(5, b"S"), ok(5, b"T"))).fired


# -- closed port ---------------------------------------------------------------

def test_closed_port_accept():
    assert an.detect_closed_port_accept({443: PortStatus.ACCEPTED, 8443: "refused"}).fired
    ind = an.detect_closed_port_accept({443: "refused", 444: "timed_out"})
    assert not ind.fired and ind.evidence["accepted"] == []


# -- baseline shift ------------------------------------------------------------

def test_baseline_shift_fires():
    ind = an.detect_baseline_shift(profile(rtt=2, cert_time=160), profile(rtt=120, cert_time=15))
    assert ind.fired and ind.evidence["rtt_dropped"] and ind.evidence["cert_rose"]


def test_baseline_shift_equal_profiles():
    p = profile(rtt=50, cert_time=20)
    assert not an.detect_baseline_shift(p, p).fired


def test_baseline_shift_label_mismatch():
    with pytest.raises(an.LabelMismatch):
        an.detect_baseline_shift(profile("a"), profile("b"))


def test_baseline_shift_zero_baseline_uses_floor():
    base = profile(rtt=100, cert_time=0.0)
    assert not an.detect_baseline_shift(profile(rtt=2, cert_time=9.9), base).fired
    assert an.detect_baseline_shift(profile(rtt=2, cert_time=10.0), base).fired


# -- evaluate_all --------------------------------------------------------------

def test_all_five_fire():
    current = profile("t", rtt=2, cert_time=200)
    inputs = DetectionInputs(
        profile=current,
        baseline=profile("t", rtt=100, cert_time=10),
        profiles=[profile(f"t{i}", rtt=2.0) for i in range(3)],
        fingerprint_history=[cert(b"A"), cert(b"B")],
        sni_pair=(ok(5, b"S"), ok(5, b"S")),
    )
    rep = an.evaluate_all(inputs)
    assert rep.mitm_suspected and rep.verdict == "mitm_suspected"
    assert len(rep.indicators) == 5 and all(i.fired for i in rep.indicators)


def test_nothing_fired_is_not_a_clean_bill():
    rep = an.evaluate_all(DetectionInputs(profile=profile(rtt=80, cert_time=5)))
    assert not rep.mitm_suspected
    assert rep.verdict == "no_indicators_fired"
    assert "no_mitm" not in rep.verdict


def test_only_fingerprints():
    rep = an.evaluate_all(DetectionInputs(fingerprint_history=[cert(b"A"), cert(b"A")]))
    assert [i.kind for i in rep.indicators] == [IndicatorKind.FINGERPRINT_CHANGE]


def test_empty_inputs():
    with pytest.raises(an.EmptyInputs):
        an.evaluate_all(DetectionInputs())


@given(st.floats(0.1, 100), st.floats(0, 2000), st.booleans(), st.booleans())
def test_verdict_is_disjunction(rtt, cert_time, same_cert, changed):
    inputs = DetectionInputs(
        profile=profile(rtt=rtt, cert_time=cert_time),
        fingerprint_history=[cert(b"A"), cert(b"B" if changed else b"A")],
        sni_pair=(ok(5, b"S"), ok(5, b"S" if same_cert else b"T")),
    )
    rep = an.evaluate_all(inputs)
    assert rep.mitm_suspected == any(i.fired for i in rep.indicators)
    assert (rep.verdict == "mitm_suspected") == rep.mitm_suspected


def test_fired_indicator_requires_evidence():
    with pytest.raises(ValueError):
        an.Indicator(IndicatorKind.TIMING_SHIFT, True, {}, {})


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(shift_ratio=0)
    assert DetectorConfig().snapshot()["variance_collapse_cv"] == 0.25
