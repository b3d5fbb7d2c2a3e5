"""Service lifecycle types, the state machine, and the Start Option Config file."""

from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .errors import IllegalTransition, MalformedConfig, StorageFailure

DEFAULT_LOG_BOUND = 2000
START_OPTION_FILENAME = "start_option.conf"


def now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat()


class StartupMode(enum.Enum):
    FROM_SCRATCH = "from_scratch"
    RESTORE = "restore"
    STANDBY = "standby"


class Phase(enum.Enum):
    NORMAL = "normal"
    CHECKPOINT = "checkpoint"
    RESTORE = "restore"


class State(enum.Enum):
    STANDBY = "standby"
    STARTING = "starting"
    RUNNING = "running"
    CHECKPOINTING = "checkpointing"
    RESTORING = "restoring"
    EXITED = "exited"


@dataclass(frozen=True)
class ExitReport:
    exit_code: int
    phase: Phase = Phase.NORMAL
    signal: Optional[int] = None
    log_tail: tuple = ()
    occurred_at: str = field(default_factory=now_rfc3339)

    def __post_init__(self):
        if not 0 <= self.exit_code <= 255:
            raise ValueError(f"exit_code out of range: {self.exit_code}")
        if self.signal is not None and self.exit_code != 128 + self.signal:
            raise ValueError("signal exit must encode exit_code as 128 + signal")

    @classmethod
    def from_returncode(cls, returncode: int, phase: Phase = Phase.NORMAL,
                        log_tail: Sequence = (), bound: int = DEFAULT_LOG_BOUND) -> "ExitReport":
        """Build a report from a ``Popen.returncode`` (negative means killed by signal)."""
        tail = tuple(log_tail)[-bound:] if bound else ()
        if returncode < 0:
            return cls(128 - returncode, phase, -returncode, tail)
        return cls(returncode & 0xFF, phase, None, tail)

    def to_dict(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "signal": self.signal,
            "phase": self.phase.value,
            "log_tail": list(self.log_tail),
            "occurred_at": self.occurred_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExitReport":
        return cls(int(d["exit_code"]), Phase(d.get("phase", "normal")), d.get("signal"),
                   tuple(d.get("log_tail", ())), d.get("occurred_at") or now_rfc3339())

    def summary(self) -> dict:
        d = self.to_dict()
        d["log_tail"] = d["log_tail"][-5:]
        return d


@dataclass(frozen=True)
class ServiceState:
    kind: State
    report: Optional[ExitReport] = None

    def __str__(self):
        return self.kind.value

    def to_dict(self) -> dict:
        d = {"state": self.kind.value}
        if self.report is not None:
            d["exit_report"] = self.report.summary()
        return d


STANDBY = ServiceState(State.STANDBY)


class EventKind(enum.Enum):
    START_REQUESTED = "start_requested"
    RESTORE_REQUESTED = "restore_requested"
    BECAME_RUNNING = "became_running"
    CHECKPOINT_REQUESTED = "checkpoint_requested"
    CHECKPOINT_ABORTED = "checkpoint_aborted"
    EXITED = "exited"
    RESTART_DECIDED = "restart_decided"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    report: Optional[ExitReport] = None
    mode: Optional[StartupMode] = None

    def __str__(self):
        return self.kind.value

    @classmethod
    def exited(cls, report: ExitReport) -> "Event":
        return cls(EventKind.EXITED, report=report)

    @classmethod
    def restart_decided(cls, mode: StartupMode) -> "Event":
        return cls(EventKind.RESTART_DECIDED, mode=mode)


# (state, event) -> successor; EXITED and RESTART_DECIDED are handled separately.
_EDGES = {
    (State.STANDBY, EventKind.START_REQUESTED): State.STARTING,
    (State.STANDBY, EventKind.RESTORE_REQUESTED): State.RESTORING,
    (State.STARTING, EventKind.BECAME_RUNNING): State.RUNNING,
    (State.RESTORING, EventKind.BECAME_RUNNING): State.RUNNING,
    (State.RUNNING, EventKind.CHECKPOINT_REQUESTED): State.CHECKPOINTING,
    (State.CHECKPOINTING, EventKind.CHECKPOINT_ABORTED): State.RUNNING,
}
_CAN_EXIT = {State.STARTING, State.RESTORING, State.RUNNING, State.CHECKPOINTING}
_RESTART_TARGET = {
    StartupMode.STANDBY: State.STANDBY,
    StartupMode.FROM_SCRATCH: State.STARTING,
    StartupMode.RESTORE: State.RESTORING,
}


def transition(current: ServiceState, event: Event) -> ServiceState:
    """Return the successor of ``current`` under ``event``.

    Raises IllegalTransition for pairs outside the lifecycle table; the caller
    keeps its current state.
    """
    kind = current.kind
    if event.kind is EventKind.EXITED:
        if kind in _CAN_EXIT and event.report is not None:
            return ServiceState(State.EXITED, event.report)
        raise IllegalTransition(current, event)
    if event.kind is EventKind.RESTART_DECIDED:
        if kind is State.EXITED and event.mode is not None:
            return ServiceState(_RESTART_TARGET[event.mode])
        raise IllegalTransition(current, event)
    try:
        return ServiceState(_EDGES[(kind, event.kind)])
    except KeyError:
        raise IllegalTransition(current, event) from None


@dataclass(frozen=True)
class StartOptionConfig:
    mode: StartupMode = StartupMode.STANDBY
    app_command: tuple = ()
    checkpoint_location: Optional[str] = None
    reason: str = "default"
    generation: int = 0
    written_at: Optional[str] = None

    def __post_init__(self):
        if self.mode is StartupMode.RESTORE and not self.checkpoint_location:
            raise MalformedConfig("restore mode requires checkpoint_location")
        if self.generation < 0:
            raise MalformedConfig("generation must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "app_command": list(self.app_command),
            "checkpoint_location": self.checkpoint_location,
            "reason": self.reason,
            "generation": self.generation,
            "written_at": self.written_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StartOptionConfig":
        if not isinstance(d, dict):
            raise MalformedConfig("config document must be an object")
        try:
            mode = StartupMode(d.get("mode", "standby"))
        except ValueError:
            raise MalformedConfig(f"unknown mode {d.get('mode')!r}") from None
        cmd = d.get("app_command") or []
        if not isinstance(cmd, list) or not all(isinstance(c, str) for c in cmd):
            raise MalformedConfig("app_command must be a list of strings")
        loc = d.get("checkpoint_location")
        if loc is not None and not isinstance(loc, str):
            raise MalformedConfig("checkpoint_location must be a string")
        gen = d.get("generation", 0)
        if not isinstance(gen, int) or isinstance(gen, bool):
            raise MalformedConfig("generation must be an integer")
        reason = d.get("reason", "")
        if not isinstance(reason, str):
            raise MalformedConfig("reason must be a string")
        return cls(mode, tuple(cmd), loc, reason, gen, d.get("written_at"))

    def dumps(self) -> bytes:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True).encode() + b"\n"


DEFAULT_CONFIG = StartOptionConfig()


def parse_start_option(raw: Optional[bytes]) -> tuple[StartOptionConfig, Optional[MalformedConfig]]:
    """Decode a Start Option Config.

    Returns ``(config, error)``.  Absent input gives the STANDBY default; a
    malformed document gives a STANDBY fallback plus the error so the caller
    can persist the fallback.
    """
    if raw is None:
        return DEFAULT_CONFIG, None
    try:
        doc = json.loads(raw.decode("utf-8"))
        return StartOptionConfig.from_dict(doc), None
    except (ValueError, UnicodeDecodeError, MalformedConfig) as exc:
        err = exc if isinstance(exc, MalformedConfig) else MalformedConfig(str(exc))
        return StartOptionConfig(reason="malformed-config"), err


def read_start_option(location) -> tuple[StartOptionConfig, Optional[MalformedConfig]]:
    try:
        raw = Path(location).read_bytes()
    except FileNotFoundError:
        raw = None
    return parse_start_option(raw)


def write_start_option(config: StartOptionConfig, location) -> StartOptionConfig:
    """Atomically persist ``config`` and return it as written.

    The generation is set one above whatever is currently on disk.
    """
    location = Path(location)
    prior, _ = read_start_option(location)
    written = replace(config, generation=prior.generation + 1, written_at=now_rfc3339())
    try:
        fd, tmp = tempfile.mkstemp(prefix=".start_option.", dir=location.parent)
    except OSError as exc:
        raise StorageFailure(f"cannot write {location}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(written.dumps())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, location)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise StorageFailure(f"cannot write {location}: {exc}") from exc
    return written
