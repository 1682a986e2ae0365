"""Timing profiles and MITM indicators computed from probe samples."""

from __future__ import annotations

import enum
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .prober import Outcome, PortStatus, ProbeSample, RttEstimate
from .tls_codec import CertificateInfo

# Absolute rise (ms) required by the baseline-shift rule when the baseline
# certificate time is zero and a ratio is meaningless.
ZERO_BASELINE_CERT_FLOOR_MS = 10.0


class InsufficientTargets(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


class LabelMismatch(ValueError):
    pass


class EmptyInputs(ValueError):
    pass


class IndicatorKind(str, enum.Enum):
    TIMING_SHIFT = "timing_shift"
    RTT_VARIANCE_COLLAPSE = "rtt_variance_collapse"
    FINGERPRINT_CHANGE = "fingerprint_change"
    SNI_MISMATCH = "sni_mismatch"
    CLOSED_PORT_ACCEPT = "closed_port_accept"
    BASELINE_SHIFT = "baseline_shift"


@dataclass(frozen=True)
class TimingProfile:
    target_label: str
    rtt_mean_ms: float
    rtt_variance: float
    cert_time_mean_ms: float
    cert_time_variance: float
    ok_sample_count: int
    failure_counts: Mapping[str, int] = field(default_factory=dict)

    @property
    def total_samples(self) -> int:
        return self.ok_sample_count + sum(self.failure_counts.values())

    @property
    def has_ok_samples(self) -> bool:
        return self.ok_sample_count > 0


@dataclass(frozen=True)
class DetectorConfig:
    shift_ratio: float = 10.0
    min_ok_samples: int = 5
    variance_collapse_cv: float = 0.25
    baseline_rtt_drop_factor: float = 2.0
    baseline_cert_rise_factor: float = 2.0

    def __post_init__(self) -> None:
        for name in ("shift_ratio", "variance_collapse_cv",
                     "baseline_rtt_drop_factor", "baseline_cert_rise_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.min_ok_samples < 0:
            raise ValueError("min_ok_samples must be >= 0")

    def snapshot(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class Indicator:
    kind: IndicatorKind
    fired: bool
    evidence: Mapping[str, Any]
    thresholds: Mapping[str, Any]

    def __post_init__(self) -> None:
        if self.fired and not self.evidence:
            raise ValueError("a fired indicator must carry evidence")


def cert_times_ms(samples: Sequence[ProbeSample], rtt_mean_ms: float) -> list[float]:
    """Per-sample certificate time: hello-to-certificate minus one RTT, floored at 0."""
    return [max(0.0, s.hello_to_cert_ms - rtt_mean_ms) for s in samples if s.ok]


def compute_profile(samples: Sequence[ProbeSample], rtt: RttEstimate, label: str) -> TimingProfile:
    """Means and population variances over the successful samples.

    A session with no successful sample still yields a profile, with
    ``ok_sample_count == 0`` and zeroed certificate statistics.
    """
    if not samples:
        raise ValueError("compute_profile needs at least one sample")
    rtts = np.asarray(rtt.sample_durations, dtype=float)
    cert = np.asarray(cert_times_ms(samples, rtt.mean_ms), dtype=float)
    failures = Counter(s.outcome.value for s in samples if s.outcome is not Outcome.OK)
    return TimingProfile(
        target_label=label,
        rtt_mean_ms=float(rtts.mean()),
        rtt_variance=float(rtts.var()),
        cert_time_mean_ms=float(cert.mean()) if cert.size else 0.0,
        cert_time_variance=float(cert.var()) if cert.size else 0.0,
        ok_sample_count=int(cert.size),
        failure_counts=dict(sorted(failures.items())),
    )


def detect_timing_shift(profile: TimingProfile, cfg: DetectorConfig = DetectorConfig()) -> Indicator:
    """Certificate time an order of magnitude (``shift_ratio``) above the RTT."""
    ratio = profile.cert_time_mean_ms / profile.rtt_mean_ms if profile.rtt_mean_ms > 0 else None
    fired = (
        profile.ok_sample_count >= cfg.min_ok_samples
        and profile.rtt_mean_ms > 0
        and profile.cert_time_mean_ms >= cfg.shift_ratio * profile.rtt_mean_ms
    )
    return Indicator(
        IndicatorKind.TIMING_SHIFT, fired,
        evidence={
            "target": profile.target_label,
            "rtt_mean_ms": profile.rtt_mean_ms,
            "cert_time_mean_ms": profile.cert_time_mean_ms,
            "ratio": ratio,
            "ok_sample_count": profile.ok_sample_count,
        },
        thresholds={"shift_ratio": cfg.shift_ratio, "min_ok_samples": cfg.min_ok_samples},
    )


def coefficient_of_variation(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=float)
    mean = arr.mean()
    return float(arr.std() / mean) if mean > 0 else 0.0


def detect_variance_collapse(profiles: Sequence[TimingProfile],
                             cfg: DetectorConfig = DetectorConfig()) -> Indicator:
    """RTTs to supposedly diverse targets that are all nearly the same.

    Uses the population standard deviation of the per-target RTT means divided
    by their mean.
    """
    if len(profiles) < 3:
        raise InsufficientTargets(f"need at least 3 targets, got {len(profiles)}")
    means = [p.rtt_mean_ms for p in profiles]
    cv = coefficient_of_variation(means)
    return Indicator(
        IndicatorKind.RTT_VARIANCE_COLLAPSE, cv < cfg.variance_collapse_cv,
        evidence={"cv": cv, "rtt_means_ms": {p.target_label: p.rtt_mean_ms for p in profiles}},
        thresholds={"variance_collapse_cv": cfg.variance_collapse_cv},
    )


def detect_fingerprint_change(history: Sequence[CertificateInfo | tuple[Any, str]]) -> Indicator:
    """Fires on the first adjacent pair of certificates with different digests.

    *history* holds either :class:`CertificateInfo` objects or
    ``(timestamp, digest)`` pairs as kept by the baseline store.
    """
    if len(history) < 2:
        raise InsufficientHistory(f"need at least 2 observations, got {len(history)}")
    entries = [(h.received_at, h.leaf_digest) if isinstance(h, CertificateInfo) else tuple(h)
               for h in history]
    for i in range(1, len(entries)):
        (t0, d0), (t1, d1) = entries[i - 1], entries[i]
        if d0 != d1:
            return Indicator(
                IndicatorKind.FINGERPRINT_CHANGE, True,
                evidence={"index": i, "previous_digest": d0, "new_digest": d1,
                          "previous_at": _plain(t0), "changed_at": _plain(t1)},
                thresholds={},
            )
    return Indicator(IndicatorKind.FINGERPRINT_CHANGE, False,
                     evidence={"observations": len(entries), "digest": entries[0][1]},
                     thresholds={})


def detect_sni_mismatch(pair: tuple[ProbeSample, ProbeSample]) -> Indicator:
    """One endpoint answering two unrelated names with the same certificate."""
    a, b = pair
    same = a.ok and b.ok and a.cert.leaf_digest == b.cert.leaf_digest
    evidence = {
        "sni_a": a.sni, "sni_b": b.sni,
        "outcome_a": a.outcome.value, "outcome_b": b.outcome.value,
        "digest_a": a.cert.leaf_digest if a.cert else None,
        "digest_b": b.cert.leaf_digest if b.cert else None,
    }
    if same:
        evidence["shared_digest"] = a.cert.leaf_digest
    return Indicator(IndicatorKind.SNI_MISMATCH, same, evidence=evidence, thresholds={})


def detect_closed_port_accept(results: Mapping[int, PortStatus | str]) -> Indicator:
    """A port the genuine server keeps closed accepted a TCP connection."""
    statuses = {int(p): PortStatus(s).value for p, s in results.items()}
    accepted = sorted(p for p, s in statuses.items() if s == PortStatus.ACCEPTED.value)
    return Indicator(IndicatorKind.CLOSED_PORT_ACCEPT, bool(accepted),
                     evidence={"ports": statuses, "accepted": accepted}, thresholds={})


def detect_baseline_shift(current: TimingProfile, baseline: TimingProfile,
                          cfg: DetectorConfig = DetectorConfig()) -> Indicator:
    """RTT fell and certificate time rose relative to a recorded baseline."""
    if current.target_label != baseline.target_label:
        raise LabelMismatch(f"{current.target_label!r} != {baseline.target_label!r}")
    rtt_dropped = baseline.rtt_mean_ms >= cfg.baseline_rtt_drop_factor * current.rtt_mean_ms
    if baseline.cert_time_mean_ms > 0:
        cert_rose = current.cert_time_mean_ms >= cfg.baseline_cert_rise_factor * baseline.cert_time_mean_ms
    else:
        cert_rose = current.cert_time_mean_ms >= ZERO_BASELINE_CERT_FLOOR_MS
    return Indicator(
        IndicatorKind.BASELINE_SHIFT, rtt_dropped and cert_rose,
        evidence={
            "target": current.target_label,
            "baseline_rtt_mean_ms": baseline.rtt_mean_ms,
            "current_rtt_mean_ms": current.rtt_mean_ms,
            "baseline_cert_time_mean_ms": baseline.cert_time_mean_ms,
            "current_cert_time_mean_ms": current.cert_time_mean_ms,
            "rtt_dropped": rtt_dropped,
            "cert_rose": cert_rose,
        },
        thresholds={
            "baseline_rtt_drop_factor": cfg.baseline_rtt_drop_factor,
            "baseline_cert_rise_factor": cfg.baseline_cert_rise_factor,
            "zero_baseline_floor_ms": ZERO_BASELINE_CERT_FLOOR_MS,
        },
    )


@dataclass
class DetectionInputs:
    """Whatever evidence a run produced; every field is optional."""

    profile: TimingProfile | None = None
    baseline: TimingProfile | None = None
    profiles: Sequence[TimingProfile] | None = None
    fingerprint_history: Sequence[Any] | None = None
    sni_pair: tuple[ProbeSample, ProbeSample] | None = None
    closed_ports: Mapping[int, PortStatus | str] | None = None


VERDICT_SUSPECTED = "mitm_suspected"
VERDICT_NONE_FIRED = "no_indicators_fired"


@dataclass(frozen=True)
class DetectionReport:
    indicators: tuple[Indicator, ...]

    @property
    def mitm_suspected(self) -> bool:
        return any(i.fired for i in self.indicators)

    @property
    def verdict(self) -> str:
        # Absence of fired indicators is not evidence of a clean path.
        return VERDICT_SUSPECTED if self.mitm_suspected else VERDICT_NONE_FIRED

    @property
    def fired_kinds(self) -> set[IndicatorKind]:
        return {i.kind for i in self.indicators if i.fired}


def evaluate_all(inputs: DetectionInputs, cfg: DetectorConfig = DetectorConfig()) -> DetectionReport:
    """Run every indicator whose inputs are present."""
    out = []
    if inputs.profile is not None:
        out.append(detect_timing_shift(inputs.profile, cfg))
        if inputs.baseline is not None:
            out.append(detect_baseline_shift(inputs.profile, inputs.baseline, cfg))
    if inputs.profiles is not None and len(inputs.profiles) >= 3:
        out.append(detect_variance_collapse(inputs.profiles, cfg))
    if inputs.fingerprint_history is not None and len(inputs.fingerprint_history) >= 2:
        out.append(detect_fingerprint_change(inputs.fingerprint_history))
    if inputs.sni_pair is not None:
        out.append(detect_sni_mismatch(inputs.sni_pair))
    if inputs.closed_ports:
        out.append(detect_closed_port_accept(inputs.closed_ports))
    if not out:
        raise EmptyInputs("no indicator has its inputs available")
    return DetectionReport(tuple(out))


def _plain(value: Any) -> Any:
    return value.isoformat() if hasattr(value, "isoformat") else value
