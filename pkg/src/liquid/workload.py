"""Supervisor-side handle on a cooperative memhog workload."""

from __future__ import annotations

import json
import os
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import CorruptSnapshot, PidUnavailable, SnapshotRefused, SpawnFailure, StorageFailure
from .memhog import STATE_DIR, TREE_FILE, snap_name

READY_TIMEOUT = 30.0
COMMAND_TIMEOUT = 60.0


@dataclass(frozen=True)
class WorkloadSpec:
    process_count: int = 1
    memory_footprint_bytes: int = 0
    tick_interval: float = 1.0
    exposed_ports: int = 0
    label: str = "memhog"
    seed: int = 0
    # seconds each process spends serializing/deserializing; widens the
    # checkpoint and restore windows for fault injection
    phase_delay: float = 0.0

    def validate(self) -> None:
        if self.process_count < 1:
            raise SpawnFailure("process_count must be >= 1")
        if self.tick_interval <= 0:
            raise SpawnFailure("tick_interval must be > 0")
        if self.memory_footprint_bytes < 0 or self.exposed_ports < 0:
            raise SpawnFailure("footprint and ports must be >= 0")

    def to_command(self, python: str = sys.executable) -> list[str]:
        return [python, "-m", "liquid.memhog",
                "--processes", str(self.process_count),
                "--footprint", str(self.memory_footprint_bytes),
                "--tick", repr(float(self.tick_interval)),
                "--ports", str(self.exposed_ports),
                "--label", self.label,
                "--seed", str(self.seed),
                "--phase-delay", repr(float(self.phase_delay))]

    @classmethod
    def from_command(cls, cmd: Sequence[str]) -> Optional["WorkloadSpec"]:
        """Recover the spec from a memhog command line, or None for other programs."""
        cmd = list(cmd)
        if "liquid.memhog" not in cmd:
            return None
        from .memhog import parse_args
        a = parse_args(cmd[cmd.index("liquid.memhog") + 1:])
        return cls(a.processes, a.footprint, a.tick, a.ports, a.label, a.seed, a.phase_delay)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class WorkloadState:
    vpids: list
    counters: dict
    digests: dict
    seeds: dict = field(default_factory=dict)
    tree: list = field(default_factory=list)  # [parent, child] edges

    @property
    def counter_list(self) -> list:
        return [self.counters[v] for v in self.vpids]

    @classmethod
    def from_processes(cls, procs: Sequence[dict]) -> "WorkloadState":
        return cls(
            vpids=[p["vpid"] for p in procs],
            counters={p["vpid"]: p["counter"] for p in procs},
            digests={p["vpid"]: p["digest"] for p in procs},
            seeds={p["vpid"]: p["seed"] for p in procs},
            tree=[[p["parent"], p["vpid"]] for p in procs if p["parent"] is not None],
        )

    @classmethod
    def load(cls, in_dir) -> "WorkloadState":
        in_dir = Path(in_dir)
        try:
            order = json.loads((in_dir / TREE_FILE).read_bytes())["vpids"]
            procs = [json.loads((in_dir / snap_name(v)).read_bytes()) for v in order]
        except (OSError, ValueError, KeyError) as exc:
            raise CorruptSnapshot(f"incomplete snapshot in {in_dir}: {exc}") from exc
        return cls.from_processes(procs)


def _short_socket_path(hint: Path) -> str:
    # AF_UNIX paths are limited to ~108 bytes
    if len(str(hint)) < 100:
        return str(hint)
    return os.path.join(tempfile.mkdtemp(prefix="lq-"), hint.name)


class ControlChannel:
    """Listening end of the supervisor/workload control socket."""

    def __init__(self, path):
        self.path = _short_socket_path(Path(path))
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        self.server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.server.bind(self.path)
        self.server.listen(1)

    def accept(self, proc: subprocess.Popen, timeout: float) -> socket.socket:
        deadline = time.monotonic() + timeout
        self.server.settimeout(0.05)
        while time.monotonic() < deadline:
            try:
                conn, _ = self.server.accept()
                conn.settimeout(None)
                return conn
            except socket.timeout:
                if proc.poll() is not None:
                    break
        raise SpawnFailure("workload never connected to the control channel")

    def close(self):
        self.server.close()
        try:
            os.unlink(self.path)
        except OSError:
            pass


class WorkloadHandle:
    """A running workload tree.

    ``on_log`` receives every log line the tree prints.  Counter bookkeeping
    (first and last counter per virtual PID) is kept here for status queries.
    """

    def __init__(self, proc: subprocess.Popen, conn: socket.socket, ready: dict,
                 app_command: Sequence[str], on_log: Optional[Callable[[str], None]] = None):
        self.proc = proc
        self.conn = conn
        self.app_command = list(app_command)
        self.vpids = list(ready["vpids"])
        self.os_pids = {int(k): v for k, v in ready["os_pids"].items()}
        self.start_counters = {int(k): v for k, v in ready["counters"].items()}
        self.digests = {int(k): v for k, v in ready.get("digests", {}).items()}
        self.tree = ready.get("tree", [])
        self.first_counters: dict = {}
        self.last_counters: dict = dict(self.start_counters)
        self.label = ""
        self.snapshotted = False
        self._on_log = on_log
        self._buf = b""
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    @property
    def pid(self) -> int:
        return self.proc.pid

    def _pump(self):
        for raw in iter(self.proc.stdout.readline, b""):
            line = raw.decode("utf-8", "replace").rstrip("\n")
            try:
                rec = json.loads(line)
                vpid, counter = int(rec["pid"]), int(rec["counter"])
                self.label = rec.get("label", self.label)
                self.first_counters.setdefault(vpid, counter)
                self.last_counters[vpid] = counter
            except (ValueError, KeyError, TypeError):
                pass
            if self._on_log is not None:
                self._on_log(line)

    def request(self, msg: dict, timeout: float = COMMAND_TIMEOUT) -> Optional[dict]:
        """Send one command and wait for its reply; None means the tree went away."""
        with self._lock:
            try:
                self.conn.sendall(json.dumps(msg).encode() + b"\n")
                self.conn.settimeout(timeout)
                while b"\n" not in self._buf:
                    chunk = self.conn.recv(65536)
                    if not chunk:
                        return None
                    self._buf += chunk
            except (OSError, socket.timeout):
                return None
            line, self._buf = self._buf.split(b"\n", 1)
            return json.loads(line)

    def alive(self) -> bool:
        return self.proc.poll() is None

    def wait(self, timeout: Optional[float] = None) -> int:
        rc = self.proc.wait(timeout)
        self._reader.join(timeout=2)
        return rc

    def signal(self, sig: int) -> None:
        """Deliver ``sig`` to every process in the tree."""
        try:
            os.killpg(self.proc.pid, sig)
        except ProcessLookupError:
            pass

    def kill(self) -> None:
        self.signal(signal.SIGKILL)
        try:
            self.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass
        self.close()

    def close(self) -> None:
        try:
            self.conn.close()
        except OSError:
            pass


def launch(app_command: Sequence[str], control_path, env_extra: dict,
           on_log: Optional[Callable[[str], None]] = None,
           timeout: float = READY_TIMEOUT,
           on_spawned: Optional[Callable[[subprocess.Popen], None]] = None) -> WorkloadHandle:
    """Start ``app_command`` and wait for its ready message."""
    channel = ControlChannel(control_path)
    env = dict(os.environ)
    env["LIQUID_CONTROL"] = channel.path
    env.update(env_extra)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "") if env.get("PYTHONPATH") else src
    try:
        proc = subprocess.Popen(list(app_command), env=env, stdout=subprocess.PIPE,
                                stdin=subprocess.DEVNULL, start_new_session=True)
    except OSError as exc:
        channel.close()
        raise SpawnFailure(f"cannot execute {app_command!r}: {exc}") from exc
    conn = None
    try:
        if on_spawned is not None:
            on_spawned(proc)
        conn = channel.accept(proc, timeout)
        conn.settimeout(timeout)
        buf = b""
        while b"\n" not in buf:
            chunk = conn.recv(65536)
            if not chunk:
                break
            buf += chunk
        if b"\n" not in buf:
            raise SpawnFailure("workload closed the control channel before ready")
        ready = json.loads(buf.split(b"\n", 1)[0])
        if ready.get("event") != "ready":
            detail = ready.get("detail", "workload failed to start")
            if ready.get("error") == "corrupt":
                raise CorruptSnapshot(detail)
            raise SpawnFailure(detail)
        conn.settimeout(None)
    except (SpawnFailure, CorruptSnapshot, OSError, socket.timeout, ValueError) as exc:
        _teardown(proc)
        if conn is not None:
            conn.close()
        if isinstance(exc, (SpawnFailure, CorruptSnapshot)):
            raise
        raise SpawnFailure(str(exc)) from exc
    finally:
        channel.close()
    handle = WorkloadHandle(proc, conn, ready, app_command, on_log)
    handle._buf = buf.split(b"\n", 1)[1]
    return handle


def _teardown(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        pass


def spawn_workload(spec: WorkloadSpec, control_channel, vpids: Optional[Sequence[int]] = None,
                   on_log: Optional[Callable[[str], None]] = None,
                   app_command: Optional[Sequence[str]] = None,
                   on_spawned=None) -> WorkloadHandle:
    """Start a fresh workload tree of ``spec.process_count`` processes."""
    spec.validate()
    if vpids is None:
        vpids = list(range(2, 2 + spec.process_count))
    if len(vpids) != spec.process_count:
        raise SpawnFailure("one virtual PID per process is required")
    cmd = list(app_command) if app_command else spec.to_command()
    return launch(cmd, control_channel, {"LIQUID_VPIDS": json.dumps(list(vpids))}, on_log,
                  on_spawned=on_spawned)


def prepare_snapshot(handle: WorkloadHandle, out_dir) -> WorkloadState:
    """Freeze the tree and serialize every process to ``out_dir/state``.

    The tree stays alive (frozen) until :func:`commit_snapshot` or
    :func:`abort_snapshot`.  On failure the tree is already resumed and no
    state files remain.
    """
    if handle.snapshotted or not handle.alive():
        raise SnapshotRefused("no running workload tree")
    out_dir = Path(out_dir)
    reply = handle.request({"cmd": "checkpoint", "out_dir": str(out_dir)})
    if reply is None:
        raise SnapshotRefused("workload tree went away during checkpoint")
    if not reply.get("ok"):
        if reply.get("error") == "refused":
            raise SnapshotRefused(reply.get("detail", "refused"))
        shutil.rmtree(out_dir / STATE_DIR, ignore_errors=True)
        raise StorageFailure(reply.get("detail", "storage failure"))
    return WorkloadState.from_processes(reply["state"]["processes"])


def commit_snapshot(handle: WorkloadHandle, timeout: float = 10.0) -> int:
    """Terminate a prepared tree; returns its Popen returncode (signal-class)."""
    handle.snapshotted = True
    handle.request({"cmd": "commit"}, timeout=timeout)
    try:
        rc = handle.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        handle.kill()
        rc = handle.proc.returncode
    handle.close()
    return rc


def abort_snapshot(handle: WorkloadHandle) -> None:
    handle.request({"cmd": "abort"})


def workload_snapshot(handle: WorkloadHandle, out_dir) -> WorkloadState:
    """Serialize the tree to ``out_dir`` then stop it with a signal-class exit."""
    state = prepare_snapshot(handle, out_dir)
    commit_snapshot(handle)
    return state


def workload_resume(state: WorkloadState, in_dir, pid_assignments: dict, control_channel,
                    app_command: Sequence[str], on_log: Optional[Callable[[str], None]] = None,
                    on_spawned=None) -> WorkloadHandle:
    """Respawn the tree recorded in ``in_dir`` under the assigned virtual PIDs."""
    missing = [v for v in state.vpids if v not in pid_assignments]
    if missing:
        raise PidUnavailable(f"no PID assignment for {missing}")
    in_dir = Path(in_dir)
    for rel in [TREE_FILE] + [snap_name(v) for v in state.vpids]:
        if not (in_dir / rel).exists():
            raise CorruptSnapshot(f"snapshot file {rel} missing")
    env = {
        "LIQUID_RESTORE_DIR": str(in_dir),
        "LIQUID_PID_MAP": json.dumps({str(k): int(v) for k, v in pid_assignments.items()}),
    }
    return launch(app_command, control_channel, env, on_log, on_spawned=on_spawned)
