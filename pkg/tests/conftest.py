import socket
import statistics

import pytest

from hsprobe.certs import self_signed_certificate
from hsprobe.responder import ResponderConfig, run_responder
from hsprobe.sim import SimConfig, run_sim

LOOPBACK = "127.0.0.1"
# Client-to-attacker distance used when a simulator sits on the path (one way, ms).
LAN_ONE_WAY_MS = 1.0


@pytest.fixture(scope="session")
def genuine_chain():
    return [self_signed_certificate("genuine.example", "genuine"),
            self_signed_certificate("Genuine Test CA", "ca")]


@pytest.fixture(scope="session")
def static_chain():
    return [self_signed_certificate("static.webmitm.example", "static")]


@pytest.fixture
def responder(genuine_chain):
    """Factory starting responders that are stopped after the test."""
    handles = []

    def start(**kwargs):
        kwargs.setdefault("cert_chain", genuine_chain)
        h = run_responder(ResponderConfig(**kwargs))
        handles.append(h)
        return h

    yield start
    for h in handles:
        h.stop()


@pytest.fixture
def simulator():
    handles = []

    def start(**kwargs):
        h = run_sim(SimConfig(**kwargs))
        handles.append(h)
        return h

    yield start
    for h in handles:
        h.stop()


@pytest.fixture
def closed_port():
    """A loopback port with nothing listening on it."""
    s = socket.socket()
    s.bind((LOOPBACK, 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture
def silent_server():
    """Accepts TCP connections and never says anything."""
    srv = socket.socket()
    srv.bind((LOOPBACK, 0))
    srv.listen(8)
    yield srv.getsockname()
    srv.close()


def median(values):
    return statistics.median(values)


@pytest.fixture
def blackhole():
    """An address whose SYNs are silently dropped: a listener with a full backlog."""
    srv = socket.socket()
    srv.bind((LOOPBACK, 0))
    srv.listen(0)
    filler = socket.create_connection(srv.getsockname(), timeout=1)
    yield srv.getsockname()
    filler.close()
    srv.close()


# -- acceptance criterion summary ----------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    info = getattr(report, "criterion", None)
    if info is None:
        return
    number, title = info
    entry = _criteria.setdefault(number, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif outcomes and all(o == "passed" for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "SKIPPED" if "skipped" in outcomes else "INCOMPLETE"
        terminalreporter.write_line(f"criterion {number}: {entry['title']}: {verdict}")
