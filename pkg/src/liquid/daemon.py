"""liquidd: the always-running supervisor that owns one service's lifecycle.

The daemon outlives its service.  Every service exit goes through the fault
policy, whose decision is persisted as the next Start Option Config and then
applied in place: restore, start from scratch, or idle in standby.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import engine
from .api import CompletionBus, ControlServer, HttpError, run_operation
from .errors import (BundleUnavailableTimeout, CorruptBundle, CorruptSnapshot, IllegalTransition,
                     LiquidError, PidUnavailable, PreconditionFailed, SnapshotRefused, SpawnFailure,
                     StorageFailure)
from .faults import FaultPolicy, decide_and_persist
from .lifecycle import (START_OPTION_FILENAME, Event, EventKind, ExitReport, Phase, ServiceState,
                        StartOptionConfig, StartupMode, State, now_rfc3339, read_start_option,
                        transition, write_start_option)
from .pidspace import VirtualPidSpace
from .workload import WorkloadHandle, WorkloadSpec, spawn_workload

log = logging.getLogger("liquidd")

# exit code reported when a restore fails before the tree is running
RESTORE_FAILURE_EXIT = 1
ADDR_FILE = "liquidd.addr"


class StateDirUnwritable(LiquidError):
    pass


class BindFailure(LiquidError):
    pass


@dataclass
class DaemonConfig:
    state_dir: Path
    listen_address: str = "127.0.0.1:0"
    ipc_socket_path: Optional[Path] = None
    shared_dir: Optional[Path] = None
    exposed_ports: int = 0
    startup_delay_base: float = 0.5
    startup_delay_per_port: float = 0.05
    fault_policy: FaultPolicy = field(default_factory=FaultPolicy)
    pid_space: dict = field(default_factory=dict)
    fork_cost_seconds: float = 0.001
    fork_cost_mode: str = "sleep"
    post_checkpoint_hooks: list = field(default_factory=list)
    await_timeout: Optional[float] = None
    poll_interval: float = 0.1
    completion_timeout: float = 60.0
    log_bound: int = 2000
    log_prefill: Optional[Path] = None
    max_start_failures: int = 5
    config_path: Optional[Path] = None

    def __post_init__(self):
        self.state_dir = Path(self.state_dir)
        self.ipc_socket_path = Path(self.ipc_socket_path or self.state_dir / "ipc.sock")
        self.shared_dir = Path(self.shared_dir or self.state_dir / "shared")
        if self.startup_delay_base < 0 or self.startup_delay_per_port < 0:
            raise ValueError("startup delay parameters must be >= 0")
        if self.fork_cost_mode not in ("sleep", "account"):
            raise ValueError("fork_cost_mode must be 'sleep' or 'account'")

    @property
    def start_option_path(self) -> Path:
        return self.state_dir / START_OPTION_FILENAME

    @property
    def startup_delay(self) -> float:
        return self.startup_delay_base + self.startup_delay_per_port * self.exposed_ports

    @classmethod
    def from_dict(cls, d: dict, config_path=None) -> "DaemonConfig":
        d = dict(d)
        model = d.pop("startup_delay_model", {}) or {}
        policy = FaultPolicy.from_dict(d.pop("fault_policy", None))
        known = set(cls.__dataclass_fields__)
        kwargs = {k: v for k, v in d.items() if k in known}
        if "base_seconds" in model:
            kwargs["startup_delay_base"] = model["base_seconds"]
        if "per_port_seconds" in model:
            kwargs["startup_delay_per_port"] = model["per_port_seconds"]
        if kwargs.get("log_prefill"):
            kwargs["log_prefill"] = Path(kwargs["log_prefill"])
        return cls(fault_policy=policy, config_path=config_path, **kwargs)

    @classmethod
    def load(cls, path) -> "DaemonConfig":
        path = Path(path).resolve()
        return cls.from_dict(json.loads(path.read_text()), config_path=path)

    def to_dict(self) -> dict:
        return {
            "state_dir": str(self.state_dir),
            "listen_address": self.listen_address,
            "ipc_socket_path": str(self.ipc_socket_path),
            "shared_dir": str(self.shared_dir),
            "exposed_ports": self.exposed_ports,
            "startup_delay_model": {"base_seconds": self.startup_delay_base,
                                    "per_port_seconds": self.startup_delay_per_port},
            "fault_policy": self.fault_policy.to_dict(),
            "pid_space": dict(self.pid_space),
            "fork_cost_seconds": self.fork_cost_seconds,
            "fork_cost_mode": self.fork_cost_mode,
            "post_checkpoint_hooks": [list(h) for h in self.post_checkpoint_hooks],
            "await_timeout": self.await_timeout,
            "poll_interval": self.poll_interval,
            "completion_timeout": self.completion_timeout,
            "log_bound": self.log_bound,
            "log_prefill": str(self.log_prefill) if self.log_prefill else None,
            "max_start_failures": self.max_start_failures,
        }


class Metrics:
    def __init__(self):
        self._lock = threading.Lock()
        self.samples: dict = {}
        self.counters: dict = {}

    def observe(self, name: str, value: float) -> None:
        with self._lock:
            self.samples.setdefault(name, []).append(value)

    def inc(self, name: str, by: float = 1) -> None:
        with self._lock:
            self.counters[name] = self.counters.get(name, 0) + by

    def render(self, gauges: dict) -> str:
        lines = []
        with self._lock:
            for name in sorted(self.samples):
                vals = self.samples[name]
                lines.append(f"{name}_count {len(vals)}")
                lines.append(f"{name}_sum {sum(vals):.6f}")
                lines.append(f"{name}_last {vals[-1]:.6f}")
            for name in sorted(self.counters):
                lines.append(f"{name} {self.counters[name]}")
        for name in sorted(gauges):
            lines.append(f"{name} {gauges[name]}")
        return "\n".join(lines) + "\n"


def _parse_address(addr: str) -> tuple:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class Daemon:
    def __init__(self, config: DaemonConfig):
        self.config = config
        self.daemon_pid = os.getpid()
        self.daemon_start_time = now_rfc3339()
        self.state = ServiceState(State.STANDBY)
        self.current_config = StartOptionConfig()
        self.phase = Phase.NORMAL
        self.handle: Optional[WorkloadHandle] = None
        self.app_command: list = []
        self.last_bundle: Optional[str] = None
        self.last_migration: Optional[dict] = None
        self.service_restart_count = 0
        self.exit_count = 0
        self._starts = 0
        self._start_failures = 0
        self.op_lock = threading.Lock()
        self.logs: deque = deque(maxlen=config.log_bound)
        self.space = VirtualPidSpace.from_params(config.pid_space)
        self.metrics = Metrics()
        self.armed: dict = {}
        self.cancel = threading.Event()
        self.shutting_down = False
        self.bus = CompletionBus(config.ipc_socket_path)
        self.server: Optional[ControlServer] = None
        self.address: Optional[str] = None
        self._log_file = None
        self._watchers: list = []
        self._server_thread: Optional[threading.Thread] = None

    # ---- boot ---------------------------------------------------------------

    def prepare_state_dir(self) -> None:
        try:
            self.config.state_dir.mkdir(parents=True, exist_ok=True)
            self.config.shared_dir.mkdir(parents=True, exist_ok=True)
            probe = self.config.state_dir / ".probe"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise StateDirUnwritable(f"state dir {self.config.state_dir} unusable: {exc}") from exc
        self._log_file = open(self.config.state_dir / "service.log", "a", buffering=1)
        if self.config.log_prefill:
            with open(self.config.log_prefill) as fh:
                for line in fh:
                    self.logs.append(line.rstrip("\n"))

    def boot(self, delay: bool = True) -> None:
        """Bring the daemon up and act on the persisted Start Option Config."""
        self.prepare_state_dir()
        if delay and self.config.startup_delay > 0:
            time.sleep(self.config.startup_delay)
        self.bus.start()
        try:
            self.server = ControlServer(_parse_address(self.config.listen_address), self)
        except OSError as exc:
            self.bus.close()
            raise BindFailure(f"cannot listen on {self.config.listen_address}: {exc}") from exc
        host, port = self.server.server_address[:2]
        self.address = f"{host}:{port}"
        self._server_thread = threading.Thread(target=self.server.serve_forever,
                                               kwargs={"poll_interval": 1.0},
                                               name="http", daemon=True)
        self._server_thread.start()

        config, err = read_start_option(self.config.start_option_path)
        if err is not None:
            log.warning("malformed start option config (%s); falling back to standby", err)
            try:
                config = write_start_option(config, self.config.start_option_path)
            except StorageFailure as exc:
                log.error("cannot persist fallback config: %s", exc)
        self.current_config = config
        self.app_command = list(config.app_command)
        if config.checkpoint_location:
            self.last_bundle = config.checkpoint_location
        (self.config.state_dir / ADDR_FILE).write_text(self.address)
        log.info("booted pid=%d address=%s mode=%s", self.daemon_pid, self.address, config.mode.value)

        if config.mode is not StartupMode.STANDBY:
            self.op_lock.acquire()
            threading.Thread(target=self._boot_action, args=(config,), name="boot", daemon=True).start()

    def _boot_action(self, config: StartOptionConfig) -> None:
        try:
            if config.mode is StartupMode.RESTORE:
                self.state = transition(self.state, Event(EventKind.RESTORE_REQUESTED))
                self._do_restore(config.checkpoint_location, self.config.await_timeout)
            else:
                self.state = transition(self.state, Event(EventKind.START_REQUESTED))
                self._do_start(list(config.app_command))
        except Exception:
            log.exception("boot action failed")
        finally:
            self.op_lock.release()
            self.bus.signal({"op_id": "boot", "op": config.mode.value, "outcome": str(self.state),
                             "duration": 0.0})

    # ---- logs ---------------------------------------------------------------

    def _on_log(self, line: str) -> None:
        self.logs.append(line)
        if self._log_file is not None:
            try:
                self._log_file.write(line + "\n")
            except (OSError, ValueError):
                pass

    # ---- service start / restore (op lock held) -----------------------------

    def _process_count(self, cmd) -> int:
        spec = WorkloadSpec.from_command(cmd)
        return spec.process_count if spec else 1

    def _count_start(self) -> None:
        self._starts += 1
        if self._starts > 1:
            self.service_restart_count += 1

    def _do_start(self, cmd: list) -> dict:
        """Start ``cmd`` from scratch; state must already be STARTING."""
        self.phase = Phase.NORMAL
        if not cmd:
            report = ExitReport(RESTORE_FAILURE_EXIT, Phase.NORMAL, log_tail=("no app_command to start",))
            self._handle_exit(report, started=False)
            raise HttpError(500, {"error": "SpawnFailure: no app_command", "exit_report": report.summary(),
                                  "service_state": str(self.state)})
        self.app_command = list(cmd)
        self._count_start()
        self.space = VirtualPidSpace.from_params(self.config.pid_space)
        vpids = []
        t0 = time.monotonic()
        try:
            vpids = [self.space.allocate() for _ in range(self._process_count(cmd))]
            handle = spawn_workload(WorkloadSpec(process_count=len(vpids)), self.config.state_dir / "control.sock",
                                    vpids, on_log=self._on_log, app_command=cmd)
        except (SpawnFailure, PidUnavailable, OSError) as exc:
            for v in vpids:
                self.space.release(v)
            report = ExitReport(RESTORE_FAILURE_EXIT, Phase.NORMAL, log_tail=(f"start failed: {exc}",))
            self._handle_exit(report, started=False)
            raise HttpError(500, {"error": f"{type(exc).__name__}: {exc}", "exit_report": report.summary(),
                                  "service_state": str(self.state)}) from None
        self.metrics.observe("start_seconds", time.monotonic() - t0)
        self._attach(handle)
        return {"outcome": "running", "vpids": handle.vpids,
                "counters": {str(k): v for k, v in handle.start_counters.items()}}

    def _do_restore(self, bundle: str, await_timeout: Optional[float]) -> dict:
        """Restore from ``bundle``; state must already be RESTORING."""
        self.phase = Phase.RESTORE
        self._count_start()
        # every incarnation runs in its own PID namespace
        self.space = VirtualPidSpace.from_params(self.config.pid_space)
        t0 = time.monotonic()
        try:
            result = engine.restore(bundle, self.space, self.config.state_dir / "control.sock",
                                    wait_timeout=await_timeout, poll_interval=self.config.poll_interval,
                                    fork_cost=self.config.fork_cost_seconds,
                                    fork_cost_mode=self.config.fork_cost_mode, on_log=self._on_log,
                                    on_spawned=lambda p: self._fire(Phase.RESTORE, p),
                                    cancel=self.cancel)
        except (CorruptBundle, CorruptSnapshot, BundleUnavailableTimeout, PidUnavailable, SpawnFailure,
                OSError) as exc:
            report = ExitReport(RESTORE_FAILURE_EXIT, Phase.RESTORE,
                                log_tail=tuple(list(self.logs)[-20:]) + (f"restore failed: {type(exc).__name__}: {exc}",))
            self.metrics.inc("restore_failures_total")
            self._handle_exit(report, started=False)
            raise HttpError(500, {"error": f"{type(exc).__name__}: {exc}", "exit_report": report.summary(),
                                  "service_state": str(self.state),
                                  "next_mode": self.current_config.mode.value}) from None
        restore_seconds = time.monotonic() - t0
        handle = result.handle
        self.app_command = list(result.manifest.get("app_command", self.app_command))
        self.last_bundle = str(bundle)
        self.metrics.observe("restore_seconds", restore_seconds)
        self.metrics.inc("fork_iterations_total", result.cost.fork_iterations)
        self.metrics.inc("direct_writes_total", result.cost.direct_writes)
        started = result.manifest.get("checkpoint_started_at")
        if started:
            total = time.time() - started
            self.metrics.observe("migration_seconds", total)
            self.last_migration = {"bundle": str(bundle), "restore_duration": restore_seconds,
                                   "total_duration": total,
                                   "fork_iterations_total": result.cost.fork_iterations,
                                   "direct_writes_total": result.cost.direct_writes,
                                   "reservation_seconds": result.reservation_seconds}
        self._attach(handle)
        return {"outcome": "running", "vpids": handle.vpids,
                "counters": {str(k): v for k, v in handle.start_counters.items()},
                "restore_duration": restore_seconds,
                "reservation": result.cost.to_dict(), "reservation_seconds": result.reservation_seconds}

    def _attach(self, handle: WorkloadHandle) -> None:
        self.handle = handle
        self.state = transition(self.state, Event(EventKind.BECAME_RUNNING))
        self.phase = Phase.NORMAL
        self._start_failures = 0
        t = threading.Thread(target=self._watch, args=(handle,), name=f"watch-{handle.pid}", daemon=True)
        self._watchers.append(t)
        t.start()

    # ---- exits and the fault loop ------------------------------------------

    def _watch(self, handle: WorkloadHandle) -> None:
        rc = handle.wait()
        with self.op_lock:
            if self.handle is not handle or getattr(handle, "exit_handled", False):
                return
            self._reap(handle, rc, self.phase)

    def _reap(self, handle: WorkloadHandle, rc: int, phase: Phase, post_checkpoint: bool = False) -> ExitReport:
        handle.exit_handled = True
        handle.close()
        for v in handle.vpids:
            self.space.release(v)
        self.handle = None
        report = ExitReport.from_returncode(rc, phase, list(self.logs), self.config.log_bound)
        self._handle_exit(report, post_checkpoint=post_checkpoint)
        return report

    def _handle_exit(self, report: ExitReport, started: bool = True, post_checkpoint: bool = False) -> None:
        """EXITED -> fault policy -> persisted decision -> applied in place."""
        self.state = transition(self.state, Event.exited(report))
        self.exit_count += 1
        self.metrics.inc("service_exits_total")
        if post_checkpoint:
            self.run_post_checkpoint_hooks(report)
        if not started:
            self._start_failures += 1
        prior = replace(self.current_config, mode=StartupMode.STANDBY,
                        app_command=tuple(self.app_command),
                        checkpoint_location=self.last_bundle or self.current_config.checkpoint_location)
        if self._start_failures >= self.config.max_start_failures:
            t0 = time.perf_counter()
            decided = StartOptionConfig(StartupMode.STANDBY, prior.app_command, prior.checkpoint_location,
                                        f"crash-loop:{self._start_failures}-consecutive-start-failures")
            try:
                decided = write_start_option(decided, self.config.start_option_path)
            except StorageFailure as exc:
                log.error("could not persist crash-loop standby: %s", exc)
                decided = replace(decided, generation=self.current_config.generation + 1)
            seconds = time.perf_counter() - t0
        else:
            decision = decide_and_persist(self.config.fault_policy, report, list(self.logs),
                                          self.config.start_option_path, prior)
            decided, seconds = decision.config, decision.seconds
        self.metrics.observe("fault_decision_seconds", seconds)
        self.current_config = decided
        log.info("service exited code=%d phase=%s -> %s (%s)", report.exit_code, report.phase.value,
                 decided.mode.value, decided.reason)
        if self.shutting_down:
            return
        self.state = transition(self.state, Event.restart_decided(decided.mode))
        if decided.mode is StartupMode.FROM_SCRATCH:
            try:
                self._do_start(list(decided.app_command) or self.app_command)
            except HttpError:
                pass
        elif decided.mode is StartupMode.RESTORE:
            try:
                self._do_restore(decided.checkpoint_location, self.config.await_timeout)
            except HttpError:
                pass
        else:
            self.phase = Phase.NORMAL

    def run_post_checkpoint_hooks(self, report: ExitReport) -> None:
        env = dict(os.environ, LIQUID_EXIT_REPORT=json.dumps(report.summary()),
                   LIQUID_BUNDLE=self.last_bundle or "")
        for cmd in self.config.post_checkpoint_hooks:
            try:
                proc = subprocess.run(list(cmd), env=env, timeout=30, capture_output=True)
                if proc.returncode != 0:
                    log.warning("post-checkpoint hook %s exited %d", cmd, proc.returncode)
            except (OSError, subprocess.TimeoutExpired) as exc:
                log.warning("post-checkpoint hook %s failed: %s", cmd, exc)

    # ---- fault injection ----------------------------------------------------

    def _fire(self, phase: Phase, proc=None) -> None:
        inj = self.armed.pop(phase, None)
        if inj is None:
            return
        log.warning("injecting %s during %s", inj, phase.value)
        pid = proc.pid if proc is not None else (self.handle.pid if self.handle else None)
        kind = inj["kind"]
        if kind == "hard_kill_daemon":
            if pid is not None:
                try:
                    os.killpg(pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
            os.kill(os.getpid(), signal.SIGKILL)
        if kind == "signal" and pid is not None:
            try:
                os.killpg(pid, int(inj.get("signal", signal.SIGKILL)))
            except ProcessLookupError:
                return
            if proc is not None:
                try:
                    proc.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    pass

    def handle_inject(self, body: dict) -> tuple:
        kind = body.get("kind")
        if kind not in ("signal", "app_exit", "hard_kill_daemon"):
            raise HttpError(422, {"error": f"unknown fault kind {kind!r}"})
        try:
            phase = Phase(body.get("phase", "normal"))
        except ValueError:
            raise HttpError(422, {"error": f"unknown phase {body.get('phase')!r}"}) from None
        if kind == "app_exit" and phase is not Phase.NORMAL:
            raise HttpError(422, {"error": "app_exit is only injectable during normal operation"})
        if phase is not Phase.NORMAL:
            self.armed[phase] = dict(body)
            return 202, {"armed": kind, "phase": phase.value}
        if kind == "hard_kill_daemon":
            self.armed[Phase.NORMAL] = dict(body)
            threading.Timer(0.05, self._fire, args=(Phase.NORMAL,)).start()
            return 202, {"delivered": kind}
        handle = self.handle
        if handle is None or self.state.kind is not State.RUNNING:
            raise HttpError(409, {"error": "service is not running", "service_state": str(self.state)})
        if kind == "signal":
            handle.signal(int(body.get("signal", signal.SIGTERM)))
        else:
            code = int(body.get("code", 1))
            if not 0 < code < 256:
                raise HttpError(422, {"error": "app_exit code must be in 1..255"})
            handle.request({"cmd": "exit", "code": code}, timeout=5)
        return 202, {"delivered": kind, "phase": phase.value, "generation_before": self.current_config.generation}

    # ---- HTTP operations ----------------------------------------------------

    def _resolve_bundle(self, location: Optional[str]) -> Optional[str]:
        if not location:
            return None
        p = Path(location)
        if not p.is_absolute():
            p = self.config.shared_dir / p
        return str(p)

    def handle_run(self, body: dict) -> tuple:
        try:
            mode = StartupMode(body["mode"]) if body.get("mode") else None
        except ValueError:
            raise HttpError(422, {"error": f"unknown mode {body.get('mode')!r}"}) from None
        cmd = body.get("app_command")
        if body.get("workload") is not None:
            try:
                spec = WorkloadSpec.from_dict(body["workload"])
                spec.validate()
            except (TypeError, SpawnFailure) as exc:
                raise HttpError(422, {"error": f"invalid workload: {exc}"}) from None
            cmd = spec.to_command()
        if cmd is not None and (not isinstance(cmd, list) or not all(isinstance(c, str) for c in cmd)):
            raise HttpError(422, {"error": "app_command must be a list of strings"})
        bundle = self._resolve_bundle(body.get("bundle_location"))
        await_timeout = body.get("await_timeout", self.config.await_timeout)
        if mode is None:
            cfg = self.current_config
            mode = cfg.mode
            bundle = bundle or cfg.checkpoint_location
            cmd = cmd or list(cfg.app_command)
        if mode is StartupMode.RESTORE:
            bundle = bundle or self.last_bundle
            if not bundle:
                raise HttpError(422, {"error": "restore needs bundle_location"})
        elif mode is StartupMode.FROM_SCRATCH:
            cmd = cmd or self.app_command
            if not cmd:
                raise HttpError(422, {"error": "from_scratch needs app_command or workload"})

        def op():
            if self.state.kind is not State.STANDBY:
                raise HttpError(409, {"error": f"service is {self.state}", "service_state": str(self.state)})
            if mode is StartupMode.STANDBY:
                return 200, {"outcome": "standby", "service_state": str(self.state)}
            if mode is StartupMode.RESTORE:
                self.state = transition(self.state, Event(EventKind.RESTORE_REQUESTED))
                result = self._do_restore(bundle, await_timeout)
            else:
                self.state = transition(self.state, Event(EventKind.START_REQUESTED))
                result = self._do_start(list(cmd))
            result["service_state"] = str(self.state)
            return 200, result

        return run_operation(self.bus, self.op_lock, "run", op, self.config.completion_timeout)

    def _resolve_image_dir(self, image_dir: Optional[str]) -> Path:
        if not image_dir:
            raise HttpError(422, {"error": "image_dir is required"})
        shared = self.config.shared_dir.resolve()
        p = Path(image_dir)
        p = (p if p.is_absolute() else shared / p).resolve()
        if p != shared and shared not in p.parents:
            raise HttpError(422, {"error": f"image_dir {image_dir} escapes the shared directory"})
        if p == shared:
            raise HttpError(422, {"error": "image_dir must be a subdirectory of the shared directory"})
        return p

    def handle_checkpoint(self, body: dict) -> tuple:
        if body.get("leave_running"):
            raise HttpError(422, {"error": "leave_running checkpoints are not supported"})
        dest = self._resolve_image_dir(body.get("image_dir"))

        def op():
            if self.state.kind is not State.RUNNING or self.handle is None:
                raise HttpError(409, {"error": f"service is {self.state}", "service_state": str(self.state)})
            t0 = time.monotonic()
            handle = self.handle
            self.state = transition(self.state, Event(EventKind.CHECKPOINT_REQUESTED))
            self.phase = Phase.CHECKPOINT
            try:
                bundle = engine.checkpoint(handle, dest, app_command=self.app_command,
                                           on_phase=lambda h: self._fire(Phase.CHECKPOINT, h.proc))
            except (StorageFailure, SnapshotRefused, PreconditionFailed) as exc:
                self.metrics.inc("checkpoint_failures_total")
                if handle.alive():
                    self.state = transition(self.state, Event(EventKind.CHECKPOINT_ABORTED))
                    self.phase = Phase.NORMAL
                    return 500, {"error": f"{type(exc).__name__}: {exc}", "service_continues": True,
                                 "service_state": str(self.state)}
                rc = handle.wait()
                report = self._reap(handle, rc, Phase.CHECKPOINT)
                return 500, {"error": f"{type(exc).__name__}: {exc}", "service_continues": False,
                             "exit_report": report.summary(), "service_state": str(self.state),
                             "next_mode": self.current_config.mode.value}
            self.last_bundle = str(dest)
            self.metrics.observe("checkpoint_seconds", bundle.duration)
            self._reap(handle, bundle.returncode, Phase.CHECKPOINT, post_checkpoint=True)
            return 200, {"bundle_location": str(dest), "checkpoint_duration": time.monotonic() - t0,
                         "snapshot_duration": bundle.duration,
                         "counters": {str(k): v for k, v in bundle.counters.items()},
                         "vpids": bundle.vpids, "service_state": str(self.state),
                         "next_mode": self.current_config.mode.value}

        return run_operation(self.bus, self.op_lock, "checkpoint", op, self.config.completion_timeout)

    # ---- queries -----------------------------------------------------------

    def status(self) -> dict:
        h = self.handle
        service = None
        if h is not None:
            service = {"os_pid": h.pid, "vpids": h.vpids,
                       "os_pids": {str(k): v for k, v in h.os_pids.items()},
                       "start_counters": {str(k): v for k, v in h.start_counters.items()},
                       "first_counters": {str(k): v for k, v in dict(h.first_counters).items()},
                       "last_counters": {str(k): v for k, v in dict(h.last_counters).items()},
                       "app_command": h.app_command}
        return {
            "daemon_pid": self.daemon_pid,
            "daemon_start_time": self.daemon_start_time,
            "service_state": str(self.state),
            "phase": self.phase.value,
            "service": service,
            "current_config": self.current_config.to_dict(),
            "service_restart_count": self.service_restart_count,
            "exit_count": self.exit_count,
            "last_bundle": self.last_bundle,
            "last_migration": self.last_migration,
            "listen_address": self.address,
            "config_path": str(self.config.config_path) if self.config.config_path else None,
            "state_dir": str(self.config.state_dir),
            "shared_dir": str(self.config.shared_dir),
            "privileged": self.space.privileged,
            "operation_in_flight": self.op_lock.locked(),
        }

    def metrics_text(self) -> str:
        return self.metrics.render({
            "service_restart_count": self.service_restart_count,
            "service_exits": self.exit_count,
            "service_running": int(self.state.kind is State.RUNNING),
        })

    # ---- shutdown -------------------------------------------------------------

    def shutdown(self, timeout: float = 5.0) -> None:
        """Stop serving; a running service gets SIGTERM and its exit is recorded."""
        self.shutting_down = True
        self.cancel.set()
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()
        h = self.handle
        if h is not None:
            h.signal(signal.SIGTERM)
            deadline = time.monotonic() + timeout
            while self.handle is h and time.monotonic() < deadline:
                time.sleep(0.02)
            if h.alive():
                h.kill()
        self.bus.close()
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"ts": record.created, "level": record.levelname.lower(),
                           "logger": record.name, "msg": record.getMessage()})


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="liquidd", description="service-liquidity supervisor daemon")
    ap.add_argument("--config", required=True, help="daemon config file (JSON)")
    ap.add_argument("--log-level", default="INFO")
    args = ap.parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        print(f"liquidd: cannot read config: {exc}", file=sys.stderr)
        return 2
    if os.environ.get("LIQUIDD_STATE_DIR"):
        raw["state_dir"] = os.environ["LIQUIDD_STATE_DIR"]
    config = DaemonConfig.from_dict(raw, config_path=Path(args.config).resolve())

    handlers = [logging.StreamHandler(sys.stdout)]
    try:
        config.state_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(config.state_dir / "liquidd.log"))
    except OSError:
        pass
    for h in handlers:
        h.setFormatter(JsonFormatter())
    logging.basicConfig(level=args.log_level.upper(), handlers=handlers)

    daemon = Daemon(config)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        daemon.boot()
    except StateDirUnwritable as exc:
        log.error("%s", exc)
        return 2
    except BindFailure as exc:
        log.error("%s", exc)
        return 3
    stop.wait()
    daemon.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
