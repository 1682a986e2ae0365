"""Append-only JSONL store of per-target baselines and certificate fingerprints.

One JSON document per line::

    {"v": 1, "label": ..., "recorded_at": "2026-01-01T00:00:00.000000Z",
     "profile": {"rtt_mean_ms": ..., "rtt_variance": ..., "cert_time_mean_ms": ...,
                 "cert_time_variance": ..., "ok_sample_count": ..., "failures": {...}},
     "fingerprints": [["<ts>", "<sha256 hex>"], ...]}

Each record is written with a single ``write`` of a complete line followed by
``fsync``. A torn final line (crash mid-write) is skipped on load and repaired
before the next append, so earlier records are never lost. Writers inside one
process are serialized; several processes writing one file is unsupported.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any

from .analysis import TimingProfile

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class StoreError(OSError):
    """I/O failure while reading or writing the store."""


def format_timestamp(ts: dt.datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text: str) -> dt.datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return dt.datetime.fromisoformat(text).astimezone(dt.timezone.utc)


@dataclass(frozen=True)
class BaselineRecord:
    target_label: str
    recorded_at: dt.datetime
    profile: TimingProfile
    fingerprints: tuple[tuple[dt.datetime, str], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        fps = tuple((ts, d) for ts, d in self.fingerprints)
        if any(a[0] > b[0] for a, b in zip(fps, fps[1:])):
            raise ValueError("fingerprints must be ordered by timestamp")
        object.__setattr__(self, "fingerprints", fps)

    def to_json(self) -> dict[str, Any]:
        p = self.profile
        return {
            "v": SCHEMA_VERSION,
            "label": self.target_label,
            "recorded_at": format_timestamp(self.recorded_at),
            "profile": {
                "rtt_mean_ms": p.rtt_mean_ms,
                "rtt_variance": p.rtt_variance,
                "cert_time_mean_ms": p.cert_time_mean_ms,
                "cert_time_variance": p.cert_time_variance,
                "ok_sample_count": p.ok_sample_count,
                "failures": dict(p.failure_counts),
            },
            "fingerprints": [[format_timestamp(ts), d] for ts, d in self.fingerprints],
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> BaselineRecord:
        if doc.get("v") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record version {doc.get('v')!r}")
        p = doc["profile"]
        profile = TimingProfile(
            target_label=doc["label"],
            rtt_mean_ms=float(p["rtt_mean_ms"]),
            rtt_variance=float(p["rtt_variance"]),
            cert_time_mean_ms=float(p["cert_time_mean_ms"]),
            cert_time_variance=float(p["cert_time_variance"]),
            ok_sample_count=int(p["ok_sample_count"]),
            failure_counts={k: int(v) for k, v in p.get("failures", {}).items()},
        )
        return cls(
            target_label=doc["label"],
            recorded_at=parse_timestamp(doc["recorded_at"]),
            profile=profile,
            fingerprints=tuple((parse_timestamp(ts), d) for ts, d in doc.get("fingerprints", [])),
        )


class BaselineStore:
    def __init__(self, path: str | os.PathLike) -> None:
        self.path = os.fspath(path)
        self._lock = threading.Lock()

    def append(self, record: BaselineRecord) -> None:
        line = json.dumps(record.to_json(), separators=(",", ":"), sort_keys=True) + "\n"
        with self._lock:
            try:
                directory = os.path.dirname(self.path)
                if directory:
                    os.makedirs(directory, exist_ok=True)
                with open(self.path, "ab+") as fh:
                    # Terminate a torn trailing line left by an earlier crash.
                    fh.seek(0, os.SEEK_END)
                    if fh.tell() > 0:
                        fh.seek(-1, os.SEEK_END)
                        if fh.read(1) != b"\n":
                            fh.write(b"\n")
                    fh.write(line.encode("utf-8"))
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StoreError(exc.errno, f"cannot append to {self.path}: {exc.strerror}") from exc

    def load(self) -> list[BaselineRecord]:
        try:
            with open(self.path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise StoreError(exc.errno, f"cannot read {self.path}: {exc.strerror}") from exc
        records = []
        for lineno, raw in enumerate(data.split(b"\n"), 1):
            if not raw.strip():
                continue
            try:
                records.append(BaselineRecord.from_json(json.loads(raw)))
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("%s:%d: skipping unreadable record (%s)", self.path, lineno, exc)
        return records

    def records_for(self, label: str) -> list[BaselineRecord]:
        return [r for r in self.load() if r.target_label == label]

    def latest(self, label: str) -> BaselineRecord | None:
        records = self.records_for(label)
        return records[-1] if records else None

    def fingerprint_history(self, label: str) -> list[tuple[dt.datetime, str]]:
        history = [fp for r in self.records_for(label) for fp in r.fingerprints]
        return sorted(history, key=lambda fp: fp[0])
