"""``hsprobe`` command line: probe, baseline, portcheck, snicheck, sim, respond.

Exit status: 0 when the run finished and no indicator fired, 2 when at least
one indicator fired, 1 on operational errors.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import signal
import sys
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor

from . import analysis, report
from .analysis import DetectionInputs, DetectorConfig
from .certs import load_chain, self_signed_certificate
from .prober import (AbortMode, AllProbesFailed, PAPER_SCHEDULE, SamplingSchedule, TargetSpec,
                     probe_closed_port, probe_sni_pair, run_session)
from .responder import ResponderConfig, run_responder
from .sim import SimConfig, SimConfigError, SimMode, run_sim
from .store import BaselineRecord, BaselineStore, StoreError

log = logging.getLogger("hsprobe")

EXIT_OK, EXIT_ERROR, EXIT_SUSPECTED = 0, 1, 2
DEFAULT_STORE = "hsprobe-baselines.jsonl"
INTERACTIVE_SCHEDULE = SamplingSchedule(5, 30.0, 5)


class TargetFileError(ValueError):
    def __init__(self, path: str, problems: list[str]) -> None:
        super().__init__(f"{path}: " + "; ".join(problems))
        self.problems = problems


def parse_hostport(text: str, default_port: int | None = 443, listen: bool = False) -> tuple[str, int]:
    """``host``, ``host:port``, ``[v6]`` or ``[v6]:port``; *listen* also allows port 0."""
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest[1:] if rest.startswith(":") else ""
    elif text.count(":") == 1:
        host, port = text.split(":")
    else:
        host, port = text, ""
    if not host:
        raise ValueError(f"missing host in {text!r}")
    if not port:
        if default_port is None:
            raise ValueError(f"missing port in {text!r}")
        return host, default_port
    if not port.isdigit() or not (0 if listen else 1) <= int(port) <= 65535:
        raise ValueError(f"bad port in {text!r}")
    return host, int(port)


def parse_targets_file(path: str) -> list[TargetSpec]:
    """Lines of ``label host[:port][ sni=<name>]``; ``#`` comments and blanks skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise TargetFileError(path, [f"cannot read: {exc.strerror}"]) from exc
    targets, problems, seen = [], [], set()
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (2, 3):
            problems.append(f"line {lineno}: expected 'label host[:port][ sni=<name>]'")
            continue
        label, hostport = fields[0], fields[1]
        sni = None
        if len(fields) == 3:
            if not fields[2].startswith("sni="):
                problems.append(f"line {lineno}: unknown field {fields[2]!r}")
                continue
            sni = fields[2][4:]
        if label in seen:
            problems.append(f"line {lineno}: duplicate label {label!r}")
            continue
        try:
            host, port = parse_hostport(hostport)
            targets.append(TargetSpec(host, port, sni=sni, label=label))
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        seen.add(label)
    if problems:
        raise TargetFileError(path, problems)
    if not targets:
        raise TargetFileError(path, ["no targets"])
    return targets


# -- shared option handling ------------------------------------------------------

def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="write the report here instead of stdout")


def _add_probe_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target", action="append", default=[], metavar="HOST[:PORT]")
    p.add_argument("--targets-file")
    p.add_argument("--sni", help="SNI for --target (default: the host name)")
    p.add_argument("--label", help="label for a single --target")
    p.add_argument("--samples", type=int)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--rtt-probes", type=int)
    p.add_argument("--paper-schedule", action="store_true",
                   help="19 samples over 300 s with 5 RTT probes")
    p.add_argument("--timeout-ms", type=float, default=10_000)
    p.add_argument("--abort-mode", choices=("fin", "rst"), default="fin")
    p.add_argument("--parallel", type=int, default=4)
    p.add_argument("--store", default=None, help=f"baseline file (env HSPROBE_STORE, default {DEFAULT_STORE})")


def _add_detector_options(p: argparse.ArgumentParser) -> None:
    d = DetectorConfig()
    p.add_argument("--shift-ratio", type=float, default=d.shift_ratio)
    p.add_argument("--min-ok-samples", type=int, default=d.min_ok_samples)
    p.add_argument("--cv-threshold", type=float, default=d.variance_collapse_cv)
    p.add_argument("--rtt-drop-factor", type=float, default=d.baseline_rtt_drop_factor)
    p.add_argument("--cert-rise-factor", type=float, default=d.baseline_cert_rise_factor)


def _detector(args) -> DetectorConfig:
    return DetectorConfig(shift_ratio=args.shift_ratio, min_ok_samples=args.min_ok_samples,
                          variance_collapse_cv=args.cv_threshold,
                          baseline_rtt_drop_factor=args.rtt_drop_factor,
                          baseline_cert_rise_factor=args.cert_rise_factor)


def _schedule(args) -> SamplingSchedule:
    base = PAPER_SCHEDULE if args.paper_schedule else INTERACTIVE_SCHEDULE
    return SamplingSchedule(
        sample_count=args.samples if args.samples is not None else base.sample_count,
        total_duration=args.duration_s if args.duration_s is not None else base.total_duration,
        rtt_probe_count=args.rtt_probes if args.rtt_probes is not None else base.rtt_probe_count,
    )


def _targets(args) -> list[TargetSpec]:
    targets = []
    if args.targets_file:
        targets.extend(parse_targets_file(args.targets_file))
    for text in args.target:
        host, port = parse_hostport(text)
        label = args.label if args.label and len(args.target) == 1 else ""
        targets.append(TargetSpec(host, port, sni=args.sni, label=label))
    if not targets:
        raise ValueError("no target given (use --target or --targets-file)")
    labels = [t.label for t in targets]
    if len(set(labels)) != len(labels):
        raise ValueError("target labels must be unique")
    return targets


def _store(args) -> BaselineStore:
    return BaselineStore(args.store or os.environ.get("HSPROBE_STORE") or DEFAULT_STORE)


def _emit(args, doc: dict) -> None:
    text = report.to_csv(doc) if args.format == "csv" else report.to_json(doc)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _run_sessions(targets: Sequence[TargetSpec], args) -> list[report.TargetResult]:
    schedule = _schedule(args)
    timeout = args.timeout_ms / 1000.0

    def one(target: TargetSpec) -> report.TargetResult:
        try:
            rtt, samples = run_session(target, schedule, timeout, AbortMode(args.abort_mode))
        except AllProbesFailed as exc:
            return report.TargetResult(target, error=str(exc))
        profile = analysis.compute_profile(samples, rtt, target.label)
        return report.TargetResult(target, rtt, samples, profile)

    with ThreadPoolExecutor(max_workers=max(1, args.parallel)) as pool:
        return list(pool.map(one, targets))


def _exit_code(doc: dict, had_error: bool) -> int:
    if doc["verdict"] == analysis.VERDICT_SUSPECTED:
        return EXIT_SUSPECTED
    return EXIT_ERROR if had_error else EXIT_OK


# -- subcommands -----------------------------------------------------------------

def cmd_probe(args) -> int:
    targets = _targets(args)
    cfg = _detector(args)
    store = _store(args)
    results = _run_sessions(targets, args)
    for res in results:
        if res.profile is None:
            continue
        baseline = store.latest(res.target.label)
        history = [(ts, d) for ts, d in store.fingerprint_history(res.target.label)]
        history += [(s.started_at, s.cert.leaf_digest) for s in res.samples if s.ok]
        inputs = DetectionInputs(profile=res.profile,
                                 baseline=baseline.profile if baseline else None,
                                 fingerprint_history=history)
        res.indicators = list(analysis.evaluate_all(inputs, cfg).indicators)
    profiles = [r.profile for r in results if r.profile is not None]
    global_indicators = [analysis.detect_variance_collapse(profiles, cfg)] if len(profiles) >= 3 else []
    doc = report.build_report("probe", results, global_indicators)
    _emit(args, doc)
    return _exit_code(doc, any(r.error for r in results))


def cmd_baseline(args) -> int:
    store = _store(args)
    if args.action == "show":
        record = store.latest(args.label)
        if record is None:
            print(f"no baseline for {args.label!r} in {store.path}", file=sys.stderr)
            return EXIT_ERROR
        print(json.dumps(record.to_json(), indent=2))
        return EXIT_OK

    results = _run_sessions(_targets(args), args)
    failed = False
    for res in results:
        if res.profile is None:
            print(f"{res.target.label}: {res.error}", file=sys.stderr)
            failed = True
            continue
        fps = tuple((s.started_at, s.cert.leaf_digest) for s in res.samples if s.ok)
        store.append(BaselineRecord(res.target.label, dt.datetime.now(dt.timezone.utc), res.profile, fps))
    doc = report.build_report("baseline", results)
    _emit(args, doc)
    return EXIT_ERROR if failed else EXIT_OK


def cmd_portcheck(args) -> int:
    timeout = args.timeout_ms / 1000.0
    results = {port: probe_closed_port(args.host, port, timeout) for port in args.ports}
    ind = analysis.detect_closed_port_accept(results)
    if args.format == "table":
        width = max(len(str(p)) for p in results)
        for port, status in results.items():
            print(f"{args.host}:{port:<{width}}  {status.value}")
    else:
        doc = report.build_report("portcheck", global_indicators=[ind],
                                  extra={"ports": {"host": args.host,
                                                   "results": {str(p): s.value for p, s in results.items()}}})
        _emit(args, doc)
    return EXIT_SUSPECTED if ind.fired else EXIT_OK


def cmd_snicheck(args) -> int:
    host, port = parse_hostport(args.endpoint)
    pair = probe_sni_pair(host, port, args.sni_a, args.sni_b, args.timeout_ms / 1000.0,
                          AbortMode(args.abort_mode))
    ind = analysis.detect_sni_mismatch(pair)
    label = f"{host}:{port}"
    doc = report.build_report("snicheck", global_indicators=[ind],
                              extra={"sni_pair": [report.sample_row(label, i, s, None)
                                                  for i, s in enumerate(pair)]})
    _emit(args, doc)
    return EXIT_SUSPECTED if ind.fired else EXIT_OK


def _wait_for_signal(duration: float | None) -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait(duration)


def _sim_config(args) -> SimConfig:
    opts: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            opts.update(json.load(fh))
    flag_values = {
        "mode": args.mode,
        "cert_gen_delay_ms": args.cert_gen_delay_ms,
        "gen_jitter_ms": args.gen_jitter_ms,
        "upstream_extra_delay_ms": args.upstream_delay_ms,
        "static_delay_ms": args.static_delay_ms,
        "byte_log_path": args.byte_log,
        "seed": args.seed,
    }
    opts.update({k: v for k, v in flag_values.items() if v is not None})
    if args.fragile_capture:
        opts["fragile_capture"] = True
    if args.no_accept_all_ports:
        opts["accept_all_ports"] = False
    if args.listen:
        opts["listen_addr"] = parse_hostport(args.listen, None, listen=True)
    upstreams = [parse_hostport(u, None) for u in args.upstream]
    upstreams += [tuple(u) for u in opts.pop("upstreams", [])]
    if "upstream_addr" in opts:
        upstreams.insert(0, tuple(opts.pop("upstream_addr")))
    if upstreams:
        opts["upstream_addr"], opts["extra_upstreams"] = upstreams[0], tuple(upstreams[1:])
    if "listen_addr" in opts:
        opts["listen_addr"] = tuple(opts["listen_addr"])
    static = args.static_cert or opts.pop("static_cert_path", None)
    if static:
        opts["static_cert"] = tuple(load_chain(static))
    if "mode" not in opts:
        raise SimConfigError("--mode is required")
    return SimConfig(**opts)


def cmd_sim(args) -> int:
    config = _sim_config(args)
    with run_sim(config) as handle:
        routes = {("*" if up is None else f"{up[0]}:{up[1]}"): port for up, port in handle.ports.items()}
        print(json.dumps({"mode": config.mode.value, "listening": routes}), flush=True)
        _wait_for_signal(args.run_for_s)
        print(json.dumps({"intercepted": handle.intercepted, "passed_through": handle.passed_through}),
              flush=True)
    return EXIT_OK


def cmd_respond(args) -> int:
    chain = load_chain(args.cert) if args.cert else [self_signed_certificate(args.cn, args.seed)]
    config = ResponderConfig(
        cert_chain=chain,
        listen_addr=parse_hostport(args.listen, None, listen=True),
        processing_delay_ms=args.delay_ms,
        strict_names=tuple(args.strict) if args.strict else None,
    )
    with run_responder(config) as handle:
        print(json.dumps({"listening": handle.port}), flush=True)
        _wait_for_signal(args.run_for_s)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsprobe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="time partial handshakes and evaluate indicators")
    _add_probe_options(p)
    _add_detector_options(p)
    _add_output(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("baseline", help="record or show per-target baselines")
    p.add_argument("action", choices=("record", "show"))
    _add_probe_options(p)
    _add_output(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("portcheck", help="connect to ports the genuine server keeps closed")
    p.add_argument("host")
    p.add_argument("ports", nargs="+", type=int)
    p.add_argument("--timeout-ms", type=float, default=3000)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_portcheck)

    p = sub.add_parser("snicheck", help="offer two unrelated SNI names to one endpoint")
    p.add_argument("endpoint", metavar="HOST[:PORT]")
    p.add_argument("sni_a")
    p.add_argument("sni_b")
    p.add_argument("--timeout-ms", type=float, default=10_000)
    p.add_argument("--abort-mode", choices=("fin", "rst"), default="fin")
    p.add_argument("--format", choices=("json",), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_snicheck)

    p = sub.add_parser("sim", help="run the interception simulator")
    p.add_argument("--mode", choices=[m.value for m in SimMode])
    p.add_argument("--config", help="JSON file with SimConfig fields")
    p.add_argument("--listen", help="HOST:PORT for the primary upstream")
    p.add_argument("--upstream", action="append", default=[], metavar="HOST:PORT")
    p.add_argument("--cert-gen-delay-ms", type=float)
    p.add_argument("--gen-jitter-ms", type=float)
    p.add_argument("--upstream-delay-ms", type=float)
    p.add_argument("--static-cert", help="PEM or DER chain served in webmitm mode")
    p.add_argument("--static-delay-ms", type=float)
    p.add_argument("--no-accept-all-ports", action="store_true")
    p.add_argument("--fragile-capture", action="store_true")
    p.add_argument("--byte-log")
    p.add_argument("--seed", type=int)
    p.add_argument("--run-for-s", type=float, help="exit after this many seconds")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("respond", help="run a certificate responder")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--cert", help="PEM or DER chain to serve")
    p.add_argument("--cn", default="responder.invalid", help="CN of the generated certificate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delay-ms", type=float, default=0.0)
    p.add_argument("--strict", action="append", metavar="NAME",
                   help="only serve these SNI names; alert on others")
    p.add_argument("--run-for-s", type=float)
    p.set_defaults(func=cmd_respond)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TargetFileError as exc:
        for problem in exc.problems:
            print(f"{args.targets_file}: {problem}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, StoreError, OSError) as exc:
        print(f"hsprobe: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
