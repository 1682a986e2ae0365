"""JSON and CSV rendering of probe runs."""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

from . import __version__
from .analysis import DetectionReport, Indicator, TimingProfile, VERDICT_NONE_FIRED, VERDICT_SUSPECTED
from .prober import ProbeSample, RttEstimate, TargetSpec
from .store import format_timestamp

CSV_COLUMNS = ("label", "sample_index", "started_at", "tcp_connect_ms", "hello_to_cert_ms",
               "cert_time_ms", "leaf_digest", "outcome")


def load_schema() -> dict[str, Any]:
    return json.loads(resources.files("hsprobe").joinpath("report.schema.json").read_text())


def _jsonable(value: Any) -> Any:
    if isinstance(value, dt.datetime):
        return format_timestamp(value)
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def indicator_json(ind: Indicator) -> dict[str, Any]:
    return {
        "kind": ind.kind.value,
        "fired": ind.fired,
        "evidence": _jsonable(ind.evidence),
        "thresholds": _jsonable(ind.thresholds),
    }


def profile_json(profile: TimingProfile) -> dict[str, Any]:
    return {
        "rtt_mean_ms": profile.rtt_mean_ms,
        "rtt_variance": profile.rtt_variance,
        "cert_time_mean_ms": profile.cert_time_mean_ms,
        "cert_time_variance": profile.cert_time_variance,
        "ok_sample_count": profile.ok_sample_count,
        "failures": dict(profile.failure_counts),
    }


def sample_row(label: str, index: int, sample: ProbeSample, rtt_mean_ms: float | None) -> dict[str, Any]:
    cert_time = None
    if sample.ok and rtt_mean_ms is not None:
        cert_time = max(0.0, sample.hello_to_cert_ms - rtt_mean_ms)
    return {
        "label": label,
        "sample_index": index,
        "started_at": format_timestamp(sample.started_at),
        "tcp_connect_ms": sample.tcp_connect_ms,
        "hello_to_cert_ms": sample.hello_to_cert_ms,
        "cert_time_ms": cert_time,
        "leaf_digest": sample.cert.leaf_digest if sample.cert else None,
        "outcome": sample.outcome.value,
        "sni": sample.sni,
        "negotiated_version": list(sample.negotiated_version) if sample.negotiated_version else None,
    }


@dataclass
class TargetResult:
    target: TargetSpec
    rtt: RttEstimate | None = None
    samples: Sequence[ProbeSample] = ()
    profile: TimingProfile | None = None
    indicators: list[Indicator] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        rtt_mean = self.rtt.mean_ms if self.rtt else None
        return {
            "label": self.target.label,
            "host": self.target.host,
            "port": self.target.port,
            "sni": self.target.sni,
            "error": self.error,
            "rtt": None if self.rtt is None else {
                "mean_ms": self.rtt.mean_ms,
                "count": self.rtt.count,
                "failures": self.rtt.failures,
                "samples_ms": list(self.rtt.sample_durations),
            },
            "profile": profile_json(self.profile) if self.profile else None,
            "samples": [sample_row(self.target.label, i, s, rtt_mean) for i, s in enumerate(self.samples)],
            "indicators": [indicator_json(i) for i in self.indicators],
        }


def build_report(command: str, targets: Iterable[TargetResult] = (),
                 global_indicators: Sequence[Indicator] = (),
                 extra: Mapping[str, Any] | None = None,
                 run_at: dt.datetime | None = None) -> dict[str, Any]:
    targets = list(targets)
    all_indicators = [i for t in targets for i in t.indicators] + list(global_indicators)
    suspected = DetectionReport(tuple(all_indicators)).mitm_suspected
    report = {
        "tool": "hsprobe",
        "version": __version__,
        "command": command,
        "run_at": format_timestamp(run_at or dt.datetime.now(dt.timezone.utc)),
        "targets": [t.to_json() for t in targets],
        "global_indicators": [indicator_json(i) for i in global_indicators],
        "verdict": VERDICT_SUSPECTED if suspected else VERDICT_NONE_FIRED,
    }
    if extra:
        report.update(_jsonable(dict(extra)))
    return report


def to_json(report: Mapping[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def to_csv(report: Mapping[str, Any]) -> str:
    """One row per handshake sample, fixed column order."""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for target in report.get("targets", []):
        for row in target["samples"]:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in CSV_COLUMNS})
    return out.getvalue()
