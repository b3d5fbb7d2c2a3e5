"""Fault Handling Module: turn a service exit into the next Start Option Config."""

from __future__ import annotations

import enum
import json
import logging
import os
import signal
import subprocess
import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .errors import HookCrashed, HookFailure, HookOutputInvalid, HookTimeout, MalformedConfig, StorageFailure
from .lifecycle import ExitReport, StartOptionConfig, StartupMode, write_start_option

log = logging.getLogger(__name__)

SIGNAL_EXIT_LOW = 128
SIGNAL_EXIT_HIGH = 159


class PolicyKind(enum.Enum):
    BUILTIN_DEFAULT = "builtin_default"
    EXTERNAL_HOOK = "external_hook"


@dataclass(frozen=True)
class FaultPolicy:
    kind: PolicyKind = PolicyKind.BUILTIN_DEFAULT
    hook_command: tuple = ()
    hook_timeout: float = 5.0
    log_window: int = 2000

    def __post_init__(self):
        if self.kind is PolicyKind.EXTERNAL_HOOK and not self.hook_command:
            raise ValueError("an external hook policy needs hook_command")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "FaultPolicy":
        d = d or {}
        return cls(PolicyKind(d.get("kind", "builtin_default")), tuple(d.get("hook_command", ())),
                   float(d.get("hook_timeout", 5.0)), int(d.get("log_window", 2000)))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "hook_command": list(self.hook_command),
                "hook_timeout": self.hook_timeout, "log_window": self.log_window}


def default_decision(report: ExitReport, prior: StartOptionConfig) -> StartOptionConfig:
    """Exit code 0 restores, a signal-class code idles, anything else starts over."""
    code = report.exit_code
    if code == 0:
        if prior.checkpoint_location:
            return StartOptionConfig(StartupMode.RESTORE, prior.app_command, prior.checkpoint_location,
                                     "exit-code-0:restore")
        # nothing to restore from yet
        return StartOptionConfig(StartupMode.FROM_SCRATCH, prior.app_command, None,
                                 "exit-code-0:no-checkpoint")
    if SIGNAL_EXIT_LOW <= code <= SIGNAL_EXIT_HIGH:
        return StartOptionConfig(StartupMode.STANDBY, prior.app_command, prior.checkpoint_location,
                                 f"exit-code-{code}:signal")
    return StartOptionConfig(StartupMode.FROM_SCRATCH, prior.app_command, prior.checkpoint_location,
                             f"exit-code-{code}:from-scratch")


def _hook_input(report: ExitReport, log_lines: Sequence[str], prior: StartOptionConfig) -> bytes:
    logs = []
    for line in log_lines:
        try:
            logs.append(json.loads(line))
        except (ValueError, TypeError):
            logs.append(line)
    doc = {"exit_report": report.to_dict(), "logs": logs, "start_option": prior.to_dict()}
    doc["exit_report"]["log_tail"] = []
    return json.dumps(doc).encode()


def _run_hook_raw(policy: FaultPolicy, report: ExitReport, log_lines, prior) -> StartOptionConfig:
    window = list(log_lines)[-policy.log_window:] if policy.log_window else []
    payload = _hook_input(report, window, prior)
    try:
        proc = subprocess.Popen(list(policy.hook_command), stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                start_new_session=True)
    except OSError as exc:
        raise HookCrashed(f"cannot run hook: {exc}") from exc
    try:
        out, _ = proc.communicate(payload, timeout=policy.hook_timeout)
    except subprocess.TimeoutExpired:
        # kill the whole group so grandchildren cannot hold the pipes open
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()
        raise HookTimeout(f"hook exceeded {policy.hook_timeout}s") from None
    if proc.returncode != 0:
        raise HookCrashed(f"hook exited {proc.returncode}")
    if len(out) > 1 << 20:
        raise HookOutputInvalid("hook output larger than 1 MiB")
    try:
        doc = json.loads(out.decode("utf-8"))
        if not isinstance(doc, dict):
            raise MalformedConfig("hook output must be a JSON object")
        doc.setdefault("app_command", list(prior.app_command))
        doc.setdefault("reason", "hook")
        doc["generation"] = prior.generation
        return StartOptionConfig.from_dict(doc)
    except (ValueError, UnicodeDecodeError, MalformedConfig) as exc:
        raise HookOutputInvalid(str(exc)) from None


def run_hook(policy: FaultPolicy, report: ExitReport, log_lines: Sequence[str],
             prior: Optional[StartOptionConfig] = None) -> StartOptionConfig:
    """Ask the user's hook program for a decision; any misbehaviour yields STANDBY.

    The hook reads ``{"exit_report", "logs", "start_option"}`` on stdin and
    writes one Start Option Config document on stdout.
    """
    if policy.kind is not PolicyKind.EXTERNAL_HOOK:
        raise ValueError("run_hook needs an external hook policy")
    prior = prior or StartOptionConfig()
    try:
        return _run_hook_raw(policy, report, log_lines, prior)
    except HookFailure as exc:
        log.warning("fault hook failed: %s", exc)
        kind = type(exc).__name__
        return StartOptionConfig(StartupMode.STANDBY, prior.app_command, prior.checkpoint_location,
                                 f"hook-failure:{kind}:{exc}")


def decide(policy: FaultPolicy, report: ExitReport, log_lines: Sequence[str],
           prior: StartOptionConfig) -> StartOptionConfig:
    if policy.kind is PolicyKind.EXTERNAL_HOOK:
        return run_hook(policy, report, log_lines, prior)
    return default_decision(report, prior)


@dataclass
class Decision:
    config: StartOptionConfig
    seconds: float
    persisted: bool
    error: Optional[str] = None


def decide_and_persist(policy: FaultPolicy, report: ExitReport, log_lines: Sequence[str],
                       config_location, prior: Optional[StartOptionConfig] = None) -> Decision:
    """Compute the restart decision and write it as the next config generation.

    A storage failure is not fatal: the in-memory decision is returned with
    ``persisted=False`` for the caller to apply anyway.
    """
    prior = prior or StartOptionConfig()
    t0 = time.perf_counter()
    config = decide(policy, report, log_lines, prior)
    try:
        config = write_start_option(config, config_location)
        persisted, error = True, None
    except StorageFailure as exc:
        log.error("could not persist start option: %s", exc)
        config = replace(config, generation=prior.generation + 1)
        persisted, error = False, str(exc)
    return Decision(config, time.perf_counter() - t0, persisted, error)
