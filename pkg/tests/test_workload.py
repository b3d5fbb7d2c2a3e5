import json
import time

import pytest

from liquid.errors import CorruptSnapshot, PidUnavailable, SnapshotRefused, SpawnFailure, StorageFailure
from liquid import storage
from liquid.workload import (WorkloadSpec, WorkloadState, abort_snapshot, prepare_snapshot, spawn_workload,
                             workload_resume, workload_snapshot)


def _spawn(tmp_path, n=3, vpids=None, **kw):
    spec = WorkloadSpec(process_count=n, memory_footprint_bytes=300_000, tick_interval=0.05, **kw)
    return spawn_workload(spec, tmp_path / "ctl.sock", vpids)


def test_spec_command_round_trip():
    spec = WorkloadSpec(process_count=4, memory_footprint_bytes=10, tick_interval=0.5, label="x", seed=3)
    assert WorkloadSpec.from_command(spec.to_command()) == spec
    assert WorkloadSpec.from_dict(spec.to_dict()) == spec
    assert WorkloadSpec.from_command(["/bin/true"]) is None


@pytest.mark.parametrize("bad", [dict(process_count=0), dict(memory_footprint_bytes=-1), dict(tick_interval=0)])
def test_spec_validation(bad):
    with pytest.raises(SpawnFailure):
        WorkloadSpec(**bad).validate()


def test_snapshot_then_resume_continues_counters(tmp_path):
    h = _spawn(tmp_path, 3, [10, 11, 12])
    assert h.vpids == [10, 11, 12]
    time.sleep(0.3)
    state = workload_snapshot(h, tmp_path / "img")
    assert not h.alive() and h.proc.returncode < 0
    assert set(state.vpids) == {10, 11, 12}
    assert all(c > 0 for c in state.counters.values())
    loaded = WorkloadState.load(tmp_path / "img")
    assert loaded.counters == state.counters and loaded.digests == state.digests

    r = workload_resume(loaded, tmp_path / "img", {v: v for v in loaded.vpids}, tmp_path / "ctl.sock",
                        h.app_command)
    try:
        assert r.start_counters == state.counters
        assert r.digests == state.digests
        deadline = time.monotonic() + 5
        while len(r.first_counters) < 3 and time.monotonic() < deadline:
            time.sleep(0.02)
        assert {v: state.counters[v] + 1 for v in state.vpids} == r.first_counters
    finally:
        r.kill()


def test_log_lines_are_json(tmp_path):
    lines = []
    h = spawn_workload(WorkloadSpec(process_count=1, tick_interval=0.02), tmp_path / "c.sock", on_log=lines.append)
    time.sleep(0.2)
    h.kill()
    rec = json.loads(lines[0])
    assert {"ts", "pid", "label", "counter"} <= set(rec)


def test_failed_prepare_resumes_tree(tmp_path):
    h = _spawn(tmp_path, 2)
    try:
        out = tmp_path / "img"
        out.mkdir()
        storage.set_quota(out, 100)
        with pytest.raises(StorageFailure):
            prepare_snapshot(h, out)
        assert h.alive()
        assert not (out / "state").exists() or not any((out / "state").iterdir())
        before = dict(h.last_counters)
        time.sleep(0.2)
        assert any(h.last_counters[v] > before[v] for v in before)
    finally:
        h.kill()


def test_abort_after_prepare_keeps_running(tmp_path):
    h = _spawn(tmp_path, 2)
    try:
        prepare_snapshot(h, tmp_path / "img")
        abort_snapshot(h)
        time.sleep(0.15)
        assert h.alive()
        with pytest.raises(SnapshotRefused):
            # second snapshot on a snapshotted handle is refused
            h.snapshotted = True
            prepare_snapshot(h, tmp_path / "img2")
    finally:
        h.kill()


def test_resume_errors(tmp_path):
    h = _spawn(tmp_path, 2, [5, 6])
    state = workload_snapshot(h, tmp_path / "img")
    with pytest.raises(PidUnavailable):
        workload_resume(state, tmp_path / "img", {5: 5}, tmp_path / "ctl.sock", h.app_command)
    (tmp_path / "img" / "state" / "6.snap").unlink()
    with pytest.raises(CorruptSnapshot):
        workload_resume(state, tmp_path / "img", {5: 5, 6: 6}, tmp_path / "ctl.sock", h.app_command)


def test_tampered_snapshot_rejected_by_workload(tmp_path):
    h = _spawn(tmp_path, 1, [7])
    state = workload_snapshot(h, tmp_path / "img")
    snap = tmp_path / "img" / "state" / "7.snap"
    doc = bytearray(snap.read_bytes())
    doc[-5] ^= 0x01
    snap.write_bytes(bytes(doc))
    with pytest.raises((CorruptSnapshot, SpawnFailure)):
        workload_resume(state, tmp_path / "img", {7: 7}, tmp_path / "ctl.sock", h.app_command)


def test_bad_command_is_spawn_failure(tmp_path):
    with pytest.raises(SpawnFailure):
        spawn_workload(WorkloadSpec(), tmp_path / "c.sock", app_command=["/nonexistent/binary"])
