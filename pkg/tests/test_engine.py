import json
import threading
import time

import pytest

from liquid import engine, storage
from liquid.errors import (BundleUnavailableTimeout, CorruptBundle, PidUnavailable, PreconditionFailed,
                           StorageFailure)
from liquid.pidspace import VirtualPidSpace
from liquid.workload import WorkloadSpec, spawn_workload


@pytest.fixture
def running(tmp_path):
    h = spawn_workload(WorkloadSpec(process_count=3, memory_footprint_bytes=200_000, tick_interval=0.05),
                       tmp_path / "ctl.sock", [400, 401, 402])
    time.sleep(0.2)
    yield h
    if h.alive():
        h.kill()


def test_checkpoint_writes_complete_verified_bundle(tmp_path, running):
    b = engine.checkpoint(running, tmp_path / "b")
    assert not running.alive()
    assert b.returncode < 0
    assert (tmp_path / "b" / engine.MARKER).exists()
    assert engine.verify_bundle(tmp_path / "b")
    assert b.vpids == [400, 401, 402]
    m = json.loads((tmp_path / "b" / engine.MANIFEST).read_text())
    assert {p["state_file"] for p in m["processes"]} == {f"state/{v}.snap" for v in (400, 401, 402)}
    roots = [p for p in m["processes"] if p["parent"] is None]
    assert [r["vpid"] for r in roots] == [400]


def test_checkpoint_requires_running(tmp_path, running):
    engine.checkpoint(running, tmp_path / "b")
    with pytest.raises(PreconditionFailed):
        engine.checkpoint(running, tmp_path / "b2")


@pytest.mark.parametrize("fault", ["quota", "unreachable"])
def test_storage_fault_leaves_service_running_and_no_bundle(tmp_path, running, fault):
    dest = tmp_path / "b"
    dest.mkdir()
    marker = storage.set_quota(dest, 64) if fault == "quota" else storage.set_unreachable(dest)
    with pytest.raises(StorageFailure):
        engine.checkpoint(running, dest)
    marker.unlink()
    assert running.alive()
    assert not any(p.name in (engine.MARKER, engine.MANIFEST) for p in dest.iterdir())
    # the service can still be checkpointed afterwards
    engine.checkpoint(running, dest)
    assert engine.verify_bundle(dest)


def test_restore_reproduces_pids_and_counters(tmp_path, running):
    b = engine.checkpoint(running, tmp_path / "b")
    space = VirtualPidSpace(last_pid=350)
    res = engine.restore(tmp_path / "b", space, tmp_path / "ctl.sock", fork_cost=0.0)
    try:
        assert sorted(res.handle.vpids) == [400, 401, 402]
        assert {k: v for k, v in res.handle.start_counters.items()} == b.counters
        assert res.cost.fork_iterations == 400 - 351
        assert res.cost.direct_writes == 0
    finally:
        res.handle.kill()


def test_privileged_restore_uses_writes(tmp_path, running):
    engine.checkpoint(running, tmp_path / "b")
    res = engine.restore(tmp_path / "b", VirtualPidSpace(last_pid=20000, privileged=True), tmp_path / "ctl.sock")
    res.handle.kill()
    assert (res.cost.direct_writes, res.cost.fork_iterations) == (3, 0)


def test_account_mode_does_not_sleep(tmp_path, running):
    engine.checkpoint(running, tmp_path / "b")
    t0 = time.monotonic()
    res = engine.restore(tmp_path / "b", VirtualPidSpace(last_pid=30000), tmp_path / "ctl.sock",
                         fork_cost=0.01, fork_cost_mode="account")
    res.handle.kill()
    assert time.monotonic() - t0 < 2.0
    assert res.reservation_seconds == pytest.approx(res.cost.fork_iterations * 0.01)
    assert res.cost.fork_iterations > 2000


@pytest.mark.parametrize("damage", ["flip", "drop_snap", "manifest", "drop_manifest"])
def test_corrupt_bundles_detected_before_spawning(tmp_path, running, damage):
    engine.checkpoint(running, tmp_path / "b")
    b = tmp_path / "b"
    if damage == "flip":
        f = b / "state" / "401.snap"
        data = bytearray(f.read_bytes())
        data[10] ^= 0xFF
        f.write_bytes(bytes(data))
    elif damage == "drop_snap":
        (b / "state" / "402.snap").unlink()
    elif damage == "manifest":
        m = json.loads((b / engine.MANIFEST).read_text())
        m["processes"][1]["vpid"] = 400
        (b / engine.MANIFEST).write_text(json.dumps(m))
    else:
        (b / engine.MANIFEST).unlink()
    assert not engine.verify_bundle(b)
    space = VirtualPidSpace()
    with pytest.raises(CorruptBundle):
        engine.restore(b, space, tmp_path / "ctl.sock")
    assert space.in_use == {1}


def test_pid_conflict_releases_everything(tmp_path, running):
    engine.checkpoint(running, tmp_path / "b")
    space = VirtualPidSpace(last_pid=300, in_use={1, 402})
    with pytest.raises(PidUnavailable):
        engine.restore(tmp_path / "b", space, tmp_path / "ctl.sock", fork_cost=0)
    assert space.in_use == {1, 402}


def test_await_times_out_only_when_bounded(tmp_path):
    with pytest.raises(BundleUnavailableTimeout):
        engine.await_bundle(tmp_path / "nothing", timeout=0.1, poll_interval=0.02)


def test_restore_blocks_until_marker_appears(tmp_path, running):
    engine.checkpoint(running, tmp_path / "b")
    marker = tmp_path / "b" / engine.MARKER
    hidden = tmp_path / "b" / ".hidden"
    marker.rename(hidden)
    out = {}

    def go():
        out["res"] = engine.restore(tmp_path / "b", VirtualPidSpace(), tmp_path / "ctl.sock",
                                    wait_timeout=None, poll_interval=0.02)

    t = threading.Thread(target=go)
    t.start()
    time.sleep(0.5)
    assert t.is_alive()
    hidden.rename(marker)
    t.join(10)
    assert not t.is_alive()
    out["res"].handle.kill()


def test_unreachable_storage_hides_bundle(tmp_path, running):
    engine.checkpoint(running, tmp_path / "b")
    storage.set_unreachable(tmp_path)
    with pytest.raises(BundleUnavailableTimeout):
        engine.await_bundle(tmp_path / "b", timeout=0.2, poll_interval=0.02)
    (tmp_path / storage.UNREACHABLE_FILE).unlink()
    engine.await_bundle(tmp_path / "b", timeout=0.2)
