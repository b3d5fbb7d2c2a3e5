import json
import os
import signal
import subprocess
import urllib.error
import urllib.request

import pytest

from liquid.daemon import Daemon, DaemonConfig

FAST_WORKLOAD = {"process_count": 2, "memory_footprint_bytes": 200_000, "tick_interval": 0.05}


def http(addr, method, path, body=None, timeout=60):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(f"http://{addr}{path}", data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as r:
            raw, status = r.read(), r.status
    except urllib.error.HTTPError as e:
        raw, status = e.read(), e.code
    if path == "/metrics":
        return status, raw.decode()
    return status, json.loads(raw or b"{}")


@pytest.fixture
def make_daemon(tmp_path):
    """Boot in-process daemons with zero startup delay; all are shut down afterwards."""
    made = []

    def factory(name="d", **overrides):
        cfg = {"state_dir": tmp_path / name, "shared_dir": tmp_path / "shared",
               "startup_delay_base": 0.0, "startup_delay_per_port": 0.0, "poll_interval": 0.02}
        cfg.update(overrides)
        d = Daemon(DaemonConfig(**cfg))
        d.boot(delay=False)
        made.append(d)
        return d

    yield factory
    for d in made:
        d.shutdown()


@pytest.fixture(autouse=True)
def _reap_strays():
    """Kill any workload tree a failing test left behind."""
    before = set(_memhog_pids())
    yield
    for pid in set(_memhog_pids()) - before:
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass


def _memhog_pids():
    try:
        out = subprocess.run(["pgrep", "-f", "liquid.memhog"], capture_output=True, text=True).stdout
    except FileNotFoundError:
        return []
    return [int(x) for x in out.split()]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
