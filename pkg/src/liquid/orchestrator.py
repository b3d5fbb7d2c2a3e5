"""Stop-and-copy migration between two daemons, and fault injection against one.

The orchestrator only talks HTTP to daemons and touches the shared
directory; it never reaches into a daemon's memory.  Destination daemons
can be launched locally from a DaemonConfig document.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import storage
from .engine import MANIFEST, MARKER
from .errors import InvalidInjection, LiquidError, PhaseMissed, PreconditionFailed
from .lifecycle import START_OPTION_FILENAME, Phase, parse_start_option

log = logging.getLogger(__name__)

ADDR_FILE = "liquidd.addr"


class ApiUnreachable(LiquidError):
    pass


class Api:
    """Minimal JSON client for one daemon's control endpoint."""

    def __init__(self, address: str, timeout: float = 600.0):
        self.address = address
        self.timeout = timeout

    def _call(self, method: str, path: str, body=None) -> tuple:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(f"http://{self.address}{path}", data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw, status = resp.read(), resp.status
        except urllib.error.HTTPError as exc:
            raw, status = exc.read(), exc.code
        except (urllib.error.URLError, OSError) as exc:
            raise ApiUnreachable(f"{self.address}{path}: {exc}") from exc
        if path == "/metrics":
            return status, raw.decode()
        return status, json.loads(raw or b"{}")

    def status(self) -> dict:
        return self._call("GET", "/status")[1]

    def metrics(self) -> dict:
        text = self._call("GET", "/metrics")[1]
        return {k: float(v) for k, v in (line.split() for line in text.splitlines() if line.strip())}

    def run(self, **body) -> tuple:
        return self._call("POST", "/run", body)

    def checkpoint(self, image_dir: str) -> tuple:
        return self._call("POST", "/checkpoint", {"image_dir": image_dir})

    def inject(self, **body) -> tuple:
        return self._call("POST", "/inject", body)

    def wait_for(self, predicate, timeout: float = 10.0, interval: float = 0.02) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            st = self.status()
            if predicate(st):
                return st
            if time.monotonic() > deadline:
                raise TimeoutError(f"condition not reached on {self.address}; last status {st['service_state']}")
            time.sleep(interval)


class LocalDaemon:
    """A ``liquidd`` child process started from a config document."""

    def __init__(self, config: dict, state_dir, env: Optional[dict] = None):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.config = dict(config, state_dir=str(self.state_dir))
        self.config_path = self.state_dir / "liquidd.json"
        self.config_path.write_text(json.dumps(self.config, indent=1))
        self.env = env
        self.proc: Optional[subprocess.Popen] = None
        self.pid: Optional[int] = None
        self.launched_at = 0.0
        self.address: Optional[str] = None

    def launch(self) -> "LocalDaemon":
        try:
            (self.state_dir / ADDR_FILE).unlink()
        except FileNotFoundError:
            pass
        env = dict(os.environ, **(self.env or {}))
        src = str(Path(__file__).resolve().parent.parent)
        env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
        self.launched_at = time.monotonic()
        self.proc = subprocess.Popen([sys.executable, "-m", "liquid.daemon", "--config", str(self.config_path),
                                      "--log-level", "WARNING"], env=env, stdout=subprocess.DEVNULL,
                                     stderr=subprocess.DEVNULL, start_new_session=True)
        self.pid = self.proc.pid
        return self

    def wait_ready(self, timeout: float = 60.0, interval: float = 0.005) -> float:
        """Block until the control endpoint is bound; returns the monotonic time it was seen."""
        addr_file = self.state_dir / ADDR_FILE
        deadline = time.monotonic() + timeout
        while not addr_file.exists():
            if self.proc.poll() is not None:
                raise LiquidError(f"liquidd exited {self.proc.returncode} during boot")
            if time.monotonic() > deadline:
                raise TimeoutError("liquidd did not come up")
            time.sleep(interval)
        ready = time.monotonic()
        self.address = addr_file.read_text().strip()
        return ready

    @classmethod
    def attach(cls, address: str) -> "LocalDaemon":
        """Adopt an already running daemon on this host, found by its address."""
        st = Api(address).status()
        if not st.get("config_path"):
            raise LiquidError("daemon does not report its config path; cannot relaunch it")
        self = cls.__new__(cls)
        self.state_dir = Path(st["state_dir"])
        self.config_path = Path(st["config_path"])
        self.config = json.loads(self.config_path.read_text())
        self.env = {"LIQUIDD_STATE_DIR": str(self.state_dir)}
        self.proc = None
        self.pid = st["daemon_pid"]
        self.launched_at = 0.0
        self.address = address
        return self

    def exited(self, timeout: float) -> bool:
        if self.proc is not None:
            try:
                self.proc.wait(timeout)
                return True
            except subprocess.TimeoutExpired:
                return False
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                os.kill(self.pid, 0)
            except ProcessLookupError:
                return True
            time.sleep(0.02)
        return False

    @property
    def api(self) -> Api:
        return Api(self.address)

    def stop(self, timeout: float = 10.0) -> None:
        if self.proc is None:
            try:
                os.kill(self.pid, signal.SIGTERM)
            except ProcessLookupError:
                return
            self.exited(timeout)
            return
        if self.proc.poll() is not None:
            return
        self.proc.terminate()
        try:
            self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            os.killpg(self.proc.pid, signal.SIGKILL)
            self.proc.wait()


@dataclass
class MigrationPlan:
    source: str
    shared_dir: Path
    destination: Optional[str] = None
    dest_config: Optional[dict] = None
    warm: bool = True
    workload: Optional[dict] = None
    repetitions: int = 1
    ports: Optional[int] = None
    transfer_delay: float = 0.0
    dest_state_root: Optional[Path] = None

    def __post_init__(self):
        self.shared_dir = Path(self.shared_dir)
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.destination is None and self.dest_config is None:
            raise ValueError("a destination address or a destination config is required")
        if not self.shared_dir.is_dir():
            raise ValueError(f"shared dir {self.shared_dir} is not reachable")


@dataclass
class MigrationReport:
    ok: bool
    warm: bool
    ports: int
    checkpoint_duration: float = 0.0
    transfer_duration: float = 0.0
    destination_startup_duration: float = 0.0
    restore_duration: float = 0.0
    total_duration: float = 0.0
    downtime: float = 0.0
    fork_iterations_total: int = 0
    failed_phase: Optional[str] = None
    error: Optional[str] = None
    bundle: Optional[str] = None
    source_counters: dict = field(default_factory=dict)
    restored_counters: dict = field(default_factory=dict)
    first_counters: dict = field(default_factory=dict)
    continuity: Optional[bool] = None
    destination: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def transfer(staging: Path, dest: Path, delay: float = 0.0) -> None:
    """Make a staged bundle visible at ``dest``, completion marker last."""
    if delay > 0:
        time.sleep(delay)
    shutil.copytree(staging, dest, ignore=shutil.ignore_patterns(MARKER))
    (dest / MARKER).touch()
    shutil.rmtree(staging, ignore_errors=True)


def _wait_first_ticks(api: Api, vpids, timeout: float = 10.0) -> dict:
    want = {str(v) for v in vpids}
    st = api.wait_for(lambda s: s.get("service") and want <= set(s["service"]["first_counters"]), timeout)
    return st["service"]["first_counters"]


def migrate_once(plan: MigrationPlan, source: Api, tag: Optional[str] = None) -> tuple:
    """One stop-and-copy migration.  Returns ``(report, destination_daemon_or_None)``."""
    tag = tag or uuid.uuid4().hex[:12]
    staging = plan.shared_dir / "outgoing" / tag
    bundle = plan.shared_dir / tag
    dest_daemon = None
    ports = plan.ports if plan.ports is not None else int((plan.dest_config or {}).get("exposed_ports", 0))
    rep = MigrationReport(ok=False, warm=plan.warm, ports=ports, bundle=str(bundle))

    st = source.status()
    if st["service_state"] != "running":
        raise PreconditionFailed(f"source service is {st['service_state']}, not running")

    def launch_dest():
        nonlocal dest_daemon
        if plan.destination is not None:
            return None
        cfg = dict(plan.dest_config, shared_dir=str(plan.shared_dir))
        if plan.ports is not None:
            cfg["exposed_ports"] = plan.ports
        root = Path(plan.dest_state_root or plan.shared_dir / "daemons")
        dest_daemon = LocalDaemon(cfg, root / f"dest-{tag}").launch()
        return dest_daemon.launched_at

    def fail(phase, err):
        rep.failed_phase, rep.error = phase, str(err)
        if dest_daemon is not None:
            dest_daemon.stop()
        return rep, None

    t0 = time.monotonic()
    if plan.warm:
        launch_dest()
    status, body = source.checkpoint(str(staging))
    t_ckpt = time.monotonic()
    rep.checkpoint_duration = t_ckpt - t0
    if status != 200:
        return fail("checkpoint", body.get("error"))
    rep.source_counters = body["counters"]

    try:
        transfer(staging, bundle, plan.transfer_delay)
    except OSError as exc:
        return fail("transfer", exc)
    t_xfer = time.monotonic()
    rep.transfer_duration = t_xfer - t_ckpt

    if not plan.warm:
        launch_dest()
    try:
        if dest_daemon is not None:
            ready = dest_daemon.wait_ready()
            rep.destination_startup_duration = ready - dest_daemon.launched_at
            dest_api = dest_daemon.api
        else:
            dest_api = Api(plan.destination)
    except (LiquidError, TimeoutError) as exc:
        return fail("destination_startup", exc)
    rep.destination = dest_api.address

    t_restore = time.monotonic()
    try:
        status, body = dest_api.run(mode="restore", bundle_location=str(bundle))
    except ApiUnreachable as exc:
        return fail("restore", exc)
    t_end = time.monotonic()
    if status != 200:
        return fail("restore", body.get("error"))
    rep.restore_duration = t_end - t_restore
    rep.total_duration = t_end - t0
    rep.downtime = t_end - t0
    rep.fork_iterations_total = body.get("reservation", {}).get("fork_iterations", 0)
    rep.restored_counters = body["counters"]
    try:
        rep.first_counters = _wait_first_ticks(dest_api, body["vpids"])
    except TimeoutError as exc:
        return fail("verify", exc)
    rep.continuity = (rep.restored_counters == rep.source_counters and
                      all(rep.first_counters[v] == c + 1 for v, c in rep.source_counters.items()))
    rep.ok = rep.continuity
    if not rep.ok:
        rep.failed_phase = "verify"
        rep.error = "restored counters do not continue the source"
    return rep, dest_daemon


def migrate(plan: MigrationPlan) -> list:
    """Run ``plan.repetitions`` migrations from the source service.

    Between repetitions the source is restarted from scratch with the plan's
    workload and each launched destination is stopped; the last one is left
    running and returned in the last report's ``destination``.
    """
    source = Api(plan.source)
    st = source.status()
    restart = {"workload": plan.workload} if plan.workload else \
        {"app_command": (st.get("service") or {}).get("app_command")}
    reports = []
    for i in range(plan.repetitions):
        if i > 0:
            source.wait_for(_settled)
            status, body = source.run(mode="from_scratch", **restart)
            if status != 200:
                raise PreconditionFailed(f"source restart failed: {body}")
            time.sleep(0.2)
        rep, dest = migrate_once(plan, source)
        reports.append(rep)
        if dest is not None and i < plan.repetitions - 1:
            dest.stop()
    return reports


# ---- fault injection --------------------------------------------------------

class FaultKind(enum.Enum):
    SIGNAL = "signal"
    APP_EXIT = "app_exit"
    CORRUPT_BUNDLE = "corrupt_bundle"
    STORAGE_EXCEED = "storage_exceed"
    NETWORK_UNREACHABLE = "network_unreachable"
    HARD_KILL_DAEMON = "hard_kill_daemon"


# expected observable behaviour per modeled cell
FAULT_MATRIX = {
    (FaultKind.SIGNAL, Phase.NORMAL): "restart in standby",
    (FaultKind.SIGNAL, Phase.CHECKPOINT): "checkpoint stop, restart in standby",
    (FaultKind.SIGNAL, Phase.RESTORE): "restart from scratch",
    (FaultKind.APP_EXIT, Phase.NORMAL): "restart from scratch",
    (FaultKind.STORAGE_EXCEED, Phase.NORMAL): "restart from scratch",
    (FaultKind.STORAGE_EXCEED, Phase.CHECKPOINT): "checkpoint stop, service continues",
    (FaultKind.CORRUPT_BUNDLE, Phase.RESTORE): "restart from scratch",
    (FaultKind.NETWORK_UNREACHABLE, Phase.CHECKPOINT): "checkpoint stop, service continues",
    (FaultKind.NETWORK_UNREACHABLE, Phase.RESTORE): "restore blocks until storage returns",
    (FaultKind.HARD_KILL_DAEMON, Phase.NORMAL): "resume previous config or standby",
    (FaultKind.HARD_KILL_DAEMON, Phase.CHECKPOINT): "resume previous config or standby",
    (FaultKind.HARD_KILL_DAEMON, Phase.RESTORE): "resume previous config or standby",
}

# exit status of an application that died on a full disk
ENOSPC_EXIT = 28


@dataclass(frozen=True)
class FaultInjection:
    kind: FaultKind
    phase: Phase
    signal: int = signal.SIGKILL
    code: int = 5

    def __post_init__(self):
        if (self.kind, self.phase) not in FAULT_MATRIX:
            raise InvalidInjection(f"{self.kind.value} during {self.phase.value} is not an injectable cell")
        if self.kind is FaultKind.APP_EXIT and not 0 < self.code < 256:
            raise InvalidInjection("app_exit code must be in 1..255")

    @property
    def expected(self) -> str:
        return FAULT_MATRIX[(self.kind, self.phase)]


@dataclass
class InjectionResult:
    kind: str
    phase: str
    expected: str
    observed_mode_after: Optional[str]
    service_survived: bool
    passed: bool
    blocked_seconds: float = 0.0
    notes: str = ""


class FaultTarget:
    """A daemon under test plus what is needed to drive it through every phase."""

    def __init__(self, daemon: LocalDaemon, workload: dict, shared_dir):
        self.daemon = daemon
        self.workload = workload
        self.shared_dir = Path(shared_dir)

    @property
    def api(self) -> Api:
        return self.daemon.api

    def ensure_running(self) -> dict:
        st = self.api.status()
        if st["service_state"] != "running":
            if st["service_state"] != "standby":
                st = self.api.wait_for(lambda s: s["service_state"] in ("running", "standby"))
            if st["service_state"] == "standby":
                key = "app_command" if isinstance(self.workload, list) else "workload"
                status, body = self.api.run(mode="from_scratch", **{key: self.workload})
                if status != 200:
                    raise LiquidError(f"could not start the service: {body}")
        return self.api.wait_for(lambda s: s["service_state"] == "running" and not s["operation_in_flight"])

    def make_bundle(self) -> Path:
        self.ensure_running()
        time.sleep(0.1)
        loc = self.shared_dir / f"fi-{uuid.uuid4().hex[:10]}"
        status, body = self.api.checkpoint(str(loc))
        if status != 200:
            raise LiquidError(f"checkpoint for the injection setup failed: {body}")
        self.api.wait_for(lambda s: s["service_state"] == "standby" and not s["operation_in_flight"])
        return loc

    def persisted_mode(self) -> str:
        path = Path(self.api.status()["state_dir"]) / START_OPTION_FILENAME
        cfg, _ = parse_start_option(path.read_bytes() if path.exists() else None)
        return cfg.mode.value

    def relaunch(self) -> None:
        self.daemon.exited(10)
        self.daemon.launch()
        self.daemon.wait_ready()


def _settled(st: dict) -> bool:
    return st["service_state"] in ("running", "standby") and not st["operation_in_flight"]


def _after_generation(api: Api, generation: int, timeout: float = 20.0) -> dict:
    return api.wait_for(lambda s: s["current_config"]["generation"] > generation and _settled(s), timeout)


def inject_fault(target: FaultTarget, injection: FaultInjection) -> InjectionResult:
    """Drive ``target`` into the phase, deliver the fault, and observe what follows."""
    kind, phase = injection.kind, injection.phase
    api = target.api
    result = InjectionResult(kind.value, phase.value, injection.expected, None, False, False)

    if kind is FaultKind.HARD_KILL_DAEMON:
        return _inject_hard_kill(target, injection, result)

    if phase is Phase.NORMAL:
        st = target.ensure_running()
        gen = st["current_config"]["generation"]
        if kind is FaultKind.SIGNAL:
            status, body = api.inject(kind="signal", signal=int(injection.signal), phase="normal")
            want = "standby"
        else:
            code = ENOSPC_EXIT if kind is FaultKind.STORAGE_EXCEED else injection.code
            status, body = api.inject(kind="app_exit", code=code, phase="normal")
            want = "from_scratch"
        if status == 409:
            raise PhaseMissed(body.get("error", "service left normal operation"))
        st = _after_generation(api, gen)
        result.observed_mode_after = st["current_config"]["mode"]
        result.service_survived = st["service_state"] == "running"
        running_ok = st["service_state"] == ("running" if want == "from_scratch" else "standby")
        result.passed = result.observed_mode_after == want and running_ok
        if kind is FaultKind.SIGNAL and injection.signal == signal.SIGKILL:
            result.notes = "memory exhaustion is modeled as a SIGKILL (OOM kill)"
        return result

    if phase is Phase.CHECKPOINT:
        st = target.ensure_running()
        gen = st["current_config"]["generation"]
        loc = target.shared_dir / f"fi-{uuid.uuid4().hex[:10]}"
        loc.mkdir()
        marker = None
        if kind is FaultKind.SIGNAL:
            api.inject(kind="signal", signal=int(injection.signal), phase="checkpoint")
        elif kind is FaultKind.STORAGE_EXCEED:
            marker = storage.set_quota(loc, 64)
        else:
            marker = storage.set_unreachable(loc)
        status, body = api.checkpoint(str(loc))
        if marker is not None:
            marker.unlink()
        no_bundle = not (loc / MARKER).exists() and not (loc / MANIFEST).exists()
        if kind is FaultKind.SIGNAL:
            st = _after_generation(api, gen)
            result.observed_mode_after = st["current_config"]["mode"]
            result.service_survived = st["service_state"] == "running"
            result.passed = (status == 500 and no_bundle and not body.get("service_continues")
                             and result.observed_mode_after == "standby" and st["service_state"] == "standby")
        else:
            st = api.wait_for(_settled)
            result.observed_mode_after = st["current_config"]["mode"]
            result.service_survived = st["service_state"] == "running"
            result.passed = (status == 500 and bool(body.get("service_continues")) and no_bundle
                             and result.service_survived and st["current_config"]["generation"] == gen)
        result.notes = body.get("error", "")
        return result

    # restore phase
    bundle = target.make_bundle()
    gen = api.status()["current_config"]["generation"]
    if kind is FaultKind.SIGNAL:
        api.inject(kind="signal", signal=int(injection.signal), phase="restore")
    elif kind is FaultKind.CORRUPT_BUNDLE:
        snap = sorted((bundle / "state").glob("*.snap"))[0]
        data = bytearray(snap.read_bytes())
        data[len(data) // 2] ^= 0xFF
        snap.write_bytes(bytes(data))
    else:
        return _inject_unreachable_restore(target, bundle, result)
    status, body = api.run(mode="restore", bundle_location=str(bundle))
    st = _after_generation(api, gen)
    result.observed_mode_after = st["current_config"]["mode"]
    result.service_survived = st["service_state"] == "running"
    result.passed = status == 500 and result.observed_mode_after == "from_scratch" and result.service_survived
    result.notes = body.get("error", "")
    return result


def _inject_unreachable_restore(target: FaultTarget, bundle: Path, result: InjectionResult,
                                hold: float = 1.0) -> InjectionResult:
    api = target.api
    withheld = bundle / f".{MARKER}.withheld"
    os.replace(bundle / MARKER, withheld)
    reply = {}
    t = threading.Thread(target=lambda: reply.update(zip(("status", "body"),
                                                          api.run(mode="restore", bundle_location=str(bundle)))))
    t0 = time.monotonic()
    t.start()
    time.sleep(hold)
    st = api.status()
    blocked = st["service_state"] == "restoring" and t.is_alive()
    os.replace(withheld, bundle / MARKER)
    t.join(60)
    result.blocked_seconds = time.monotonic() - t0
    st = api.wait_for(_settled)
    result.observed_mode_after = st["current_config"]["mode"]
    result.service_survived = st["service_state"] == "running"
    result.passed = blocked and reply.get("status") == 200 and result.service_survived
    result.notes = f"blocked {hold:.1f}s while storage was unreachable, restored once it returned"
    return result


def _inject_hard_kill(target: FaultTarget, injection: FaultInjection, result: InjectionResult) -> InjectionResult:
    api = target.api
    phase = injection.phase
    bundle = None
    if phase is Phase.RESTORE:
        bundle = target.make_bundle()
    else:
        target.ensure_running()
    before = api.status()
    expected_mode = target.persisted_mode()
    if phase is Phase.NORMAL:
        api.inject(kind="hard_kill_daemon", phase="normal")
    else:
        api.inject(kind="hard_kill_daemon", phase=phase.value)
        loc = target.shared_dir / f"fi-{uuid.uuid4().hex[:10]}"
        try:
            if phase is Phase.CHECKPOINT:
                api.checkpoint(str(loc))
            else:
                api.run(mode="restore", bundle_location=str(bundle))
        except ApiUnreachable:
            pass
        if phase is Phase.CHECKPOINT and (loc / MARKER).exists():
            result.notes = "bundle completed despite the kill"
    target.relaunch()
    st = api_after = target.api.wait_for(_settled, timeout=30)
    result.observed_mode_after = st["current_config"]["mode"]
    result.service_survived = st["service_state"] == "running"
    fresh_daemon = st["daemon_pid"] != before["daemon_pid"]
    mode_ok = result.observed_mode_after == expected_mode
    state_ok = api_after["service_state"] == ("standby" if expected_mode == "standby" else "running")
    result.passed = fresh_daemon and mode_ok and state_ok and not result.notes
    result.notes = result.notes or f"rebooted into persisted mode {expected_mode}"
    return result
