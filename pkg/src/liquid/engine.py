"""Stop-and-copy checkpoint/restore of a workload tree.

Bundle layout::

    <dir>/manifest            JSON: process tree, per-file and whole-bundle digests
    <dir>/state/<pid>.snap    one per process
    <dir>/state/tree.json     process order and edges
    <dir>/BUNDLE_COMPLETE     empty marker, written last
"""

from __future__ import annotations

import errno
import json
import logging
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import storage
from .errors import (BundleUnavailableTimeout, CorruptBundle, CorruptSnapshot, PidUnavailable,
                     PreconditionFailed, SnapshotRefused, SpawnFailure, StorageFailure)
from .lifecycle import now_rfc3339
from .memhog import STATE_DIR, TREE_FILE, snap_name
from .pidspace import ReservationCost, VirtualPidSpace, reserve_pid
from .workload import (WorkloadHandle, WorkloadState, abort_snapshot, commit_snapshot,
                       prepare_snapshot, workload_resume)

log = logging.getLogger(__name__)

MANIFEST = "manifest"
MARKER = "BUNDLE_COMPLETE"
BUNDLE_FORMAT = "liquid-bundle/1"


@dataclass
class CheckpointBundle:
    location: Path
    manifest: dict
    returncode: Optional[int] = None  # of the terminated tree
    duration: float = 0.0

    @property
    def vpids(self) -> list:
        return [p["vpid"] for p in self.manifest["processes"]]

    @property
    def counters(self) -> dict:
        return {int(k): v for k, v in self.manifest["counters"].items()}

    @classmethod
    def open(cls, location) -> "CheckpointBundle":
        location = Path(location)
        try:
            manifest = json.loads((location / MANIFEST).read_bytes())
        except (OSError, ValueError) as exc:
            raise CorruptBundle(f"unreadable manifest: {exc}") from exc
        return cls(location, manifest)


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    detail: str = ""

    def __bool__(self):
        return self.ok


def _bundle_checksum(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "bundle_checksum"}
    return storage.digest(json.dumps(body, sort_keys=True).encode())


def _clear_bundle(dest: Path, created: bool) -> None:
    if created:
        shutil.rmtree(dest, ignore_errors=True)
        return
    for name in (MARKER, MANIFEST):
        try:
            (dest / name).unlink()
        except OSError:
            pass
    shutil.rmtree(dest / STATE_DIR, ignore_errors=True)


def checkpoint(handle: WorkloadHandle, dest_dir, app_command=None,
               on_phase: Optional[Callable[[WorkloadHandle], None]] = None) -> CheckpointBundle:
    """Snapshot ``handle`` into ``dest_dir`` and stop the tree.

    Every storage step happens before the tree is terminated, so a failure
    leaves the service running and no bundle on disk.
    """
    if handle.snapshotted or not handle.alive():
        raise PreconditionFailed("checkpoint requires a running workload")
    dest = Path(dest_dir)
    created = not dest.exists()
    started_wall, t0 = time.time(), time.monotonic()
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageFailure(f"cannot create {dest}: {exc}") from exc
    _clear_bundle(dest, created=False)
    if on_phase is not None:
        on_phase(handle)
    try:
        state = prepare_snapshot(handle, dest)
    except (SnapshotRefused, StorageFailure):
        _clear_bundle(dest, created)
        raise
    try:
        manifest = _build_manifest(dest, state, app_command or handle.app_command,
                                   handle.label, started_wall)
        storage.write_bytes(dest / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True).encode())
        storage.write_bytes(dest / MARKER, b"")
    except (OSError, CorruptSnapshot) as exc:
        if handle.alive():
            abort_snapshot(handle)
        _clear_bundle(dest, created)
        raise StorageFailure(f"writing bundle failed: {exc}") from exc
    if not handle.alive():
        # the tree died while frozen: nothing trustworthy was captured
        _clear_bundle(dest, created)
        raise SnapshotRefused("workload tree died during checkpoint")
    rc = commit_snapshot(handle)
    return CheckpointBundle(dest, manifest, rc, time.monotonic() - t0)


def _build_manifest(dest: Path, state: WorkloadState, app_command, label, started_wall) -> dict:
    by_vpid = {}
    for v in state.vpids:
        by_vpid[v] = storage.file_digest(dest / snap_name(v))
    parents = {child: parent for parent, child in state.tree}
    manifest = {
        "format": BUNDLE_FORMAT,
        "app_command": list(app_command),
        "label": label,
        "created_at": now_rfc3339(),
        "checkpoint_started_at": started_wall,
        "processes": [{"vpid": v, "parent": parents.get(v), "state_file": snap_name(v),
                       "checksum": by_vpid[v]} for v in state.vpids],
        "files": {TREE_FILE: storage.file_digest(dest / TREE_FILE)},
        "counters": {str(v): state.counters[v] for v in state.vpids},
        "digests": {str(v): state.digests[v] for v in state.vpids},
    }
    manifest["bundle_checksum"] = _bundle_checksum(manifest)
    return manifest


def verify_bundle(location) -> VerifyResult:
    """Check manifest presence, file presence, every digest, and tree shape."""
    location = Path(location)
    try:
        manifest = json.loads((location / MANIFEST).read_bytes())
    except FileNotFoundError:
        return VerifyResult(False, "manifest missing")
    except (OSError, ValueError) as exc:
        return VerifyResult(False, f"manifest unreadable: {exc}")
    try:
        if manifest.get("format") != BUNDLE_FORMAT:
            return VerifyResult(False, "unknown bundle format")
        if manifest.get("bundle_checksum") != _bundle_checksum(manifest):
            return VerifyResult(False, "bundle checksum mismatch")
        files = {p["state_file"]: p["checksum"] for p in manifest["processes"]}
        files.update(manifest["files"])
        for rel, want in files.items():
            path = location / rel
            if not path.is_file():
                return VerifyResult(False, f"{rel} missing")
            if storage.file_digest(path) != want:
                return VerifyResult(False, f"{rel} checksum mismatch")
        vpids = [p["vpid"] for p in manifest["processes"]]
        if len(set(vpids)) != len(vpids):
            return VerifyResult(False, "duplicate PIDs in process tree")
        roots = [p for p in manifest["processes"] if p["parent"] is None]
        if len(roots) != 1 or any(p["parent"] not in vpids for p in manifest["processes"] if p["parent"] is not None):
            return VerifyResult(False, "process tree is not a single rooted tree")
    except (KeyError, TypeError, AttributeError, OSError) as exc:
        return VerifyResult(False, f"malformed manifest: {exc}")
    return VerifyResult(True)


def await_bundle(location, timeout: Optional[float] = None, poll_interval: float = 0.1,
                 cancel: Optional[threading.Event] = None) -> None:
    """Block until the bundle's completion marker is visible.

    ``timeout=None`` waits forever.  An unreachable-storage marker above the
    bundle hides it, as a disconnected network filesystem would.
    """
    marker = Path(location) / MARKER
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        try:
            storage.check_writable(marker)
            reachable = True
        except OSError as exc:
            reachable = exc.errno != errno.EHOSTUNREACH
        if reachable and marker.exists():
            return
        if cancel is not None and cancel.is_set():
            raise BundleUnavailableTimeout("wait cancelled")
        if deadline is not None and time.monotonic() >= deadline:
            raise BundleUnavailableTimeout(f"{marker} did not appear within {timeout}s")
        wait = poll_interval if deadline is None else max(0.0, min(poll_interval, deadline - time.monotonic()))
        time.sleep(wait)


@dataclass
class RestoreResult:
    handle: WorkloadHandle
    cost: ReservationCost
    reservation_seconds: float
    manifest: dict = field(default_factory=dict)


def reserve_tree(space: VirtualPidSpace, vpids) -> ReservationCost:
    """Reserve and allocate every PID in manifest order; all-or-nothing."""
    total = ReservationCost()
    taken = []
    try:
        for target in vpids:
            total = total + reserve_pid(space, target)
            got = space.allocate()
            taken.append(got)
            if got != target:
                raise PidUnavailable(f"wanted PID {target}, namespace handed out {got}")
    except PidUnavailable:
        for pid in taken:
            space.release(pid)
        raise
    return total


def restore(bundle_location, space: VirtualPidSpace, control_path, wait_timeout: Optional[float] = None,
            poll_interval: float = 0.1, fork_cost: float = 0.001, fork_cost_mode: str = "sleep",
            on_log=None, on_spawned=None, cancel: Optional[threading.Event] = None) -> RestoreResult:
    """Bring the tree in ``bundle_location`` back with its original PIDs.

    ``fork_cost_mode="sleep"`` spends ``fork_cost`` seconds per fork
    iteration in real time; ``"account"`` only reports it in
    ``reservation_seconds``.
    """
    await_bundle(bundle_location, wait_timeout, poll_interval, cancel)
    check = verify_bundle(bundle_location)
    if not check:
        raise CorruptBundle(check.detail)
    bundle = CheckpointBundle.open(bundle_location)
    vpids = bundle.vpids
    cost = reserve_tree(space, vpids)
    simulated = cost.seconds(fork_cost)
    if fork_cost_mode == "sleep" and simulated > 0:
        time.sleep(simulated)
    try:
        state = WorkloadState.load(bundle_location)
        handle = workload_resume(state, bundle_location, {v: v for v in vpids}, control_path,
                                 bundle.manifest["app_command"], on_log=on_log, on_spawned=on_spawned)
    except (CorruptSnapshot, SpawnFailure, PidUnavailable):
        for v in vpids:
            space.release(v)
        raise
    if sorted(handle.vpids) != sorted(vpids):
        handle.kill()
        for v in vpids:
            space.release(v)
        raise PidUnavailable("restored tree does not carry the recorded PIDs")
    return RestoreResult(handle, cost, simulated, bundle.manifest)
