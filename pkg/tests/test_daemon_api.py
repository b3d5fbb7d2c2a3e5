import json
import os
import subprocess
import sys
import threading
import time

import pytest

from conftest import FAST_WORKLOAD, http
from liquid.daemon import DaemonConfig, main as liquidd_main
from liquid.lifecycle import StartOptionConfig, StartupMode, read_start_option, write_start_option


def wait_state(d, *states, timeout=10):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        st = d.status()
        if st["service_state"] in states and not st["operation_in_flight"]:
            return st
        time.sleep(0.02)
    raise AssertionError(f"state {d.status()['service_state']} never became {states}")


def start(d, workload=FAST_WORKLOAD):
    status, body = http(d.address, "POST", "/run", {"mode": "from_scratch", "workload": workload})
    assert status == 200, body
    return body


def test_boots_in_standby_without_config(make_daemon):
    d = make_daemon()
    st = http(d.address, "GET", "/status")[1]
    assert st["service_state"] == "standby" and st["service"] is None
    assert st["daemon_pid"] == os.getpid()
    assert (d.config.state_dir / "liquidd.addr").read_text() == d.address


def test_run_checkpoint_restore_cycle(make_daemon):
    d = make_daemon()
    body = start(d)
    assert body["outcome"] == "running" and body["vpids"] == [2, 3]
    time.sleep(0.2)
    status, ck = http(d.address, "POST", "/checkpoint", {"image_dir": "b1"})
    assert status == 200, ck
    assert ck["service_state"] == "standby" and ck["next_mode"] == "standby"
    assert ck["bundle_location"] == str(d.config.shared_dir / "b1")
    status, rs = http(d.address, "POST", "/run", {"mode": "restore", "bundle_location": "b1"})
    assert status == 200, rs
    assert rs["counters"] == ck["counters"]
    metrics = http(d.address, "GET", "/metrics")[1]
    names = {line.split()[0] for line in metrics.splitlines()}
    assert {"fault_decision_seconds_count", "checkpoint_seconds_sum", "restore_seconds_last",
            "service_restart_count", "fork_iterations_total"} <= names
    for line in metrics.splitlines():
        float(line.split()[1])


def test_run_without_mode_follows_config(make_daemon):
    d = make_daemon()
    status, body = http(d.address, "POST", "/run", {})
    assert (status, body["outcome"]) == (200, "standby")


@pytest.mark.parametrize("path,body", [
    ("/run", {"mode": "sideways"}),
    ("/run", {"mode": "restore"}),
    ("/run", {"mode": "from_scratch"}),
    ("/run", {"mode": "from_scratch", "workload": {"process_count": 0}}),
    ("/run", {"mode": "from_scratch", "app_command": "python"}),
    ("/checkpoint", {}),
    ("/checkpoint", {"image_dir": "../../etc"}),
    ("/checkpoint", {"image_dir": "x", "leave_running": True}),
    ("/inject", {"kind": "meteor"}),
    ("/inject", {"kind": "signal", "phase": "lunch"}),
])
def test_invalid_requests_are_422(make_daemon, path, body):
    d = make_daemon()
    assert http(d.address, "POST", path, body)[0] == 422


def test_bad_json_is_422(make_daemon):
    import urllib.request, urllib.error
    d = make_daemon()
    req = urllib.request.Request(f"http://{d.address}/run", data=b"{nope", method="POST")
    with pytest.raises(urllib.error.HTTPError) as e:
        urllib.request.urlopen(req)
    assert e.value.code == 422


def test_state_conflicts_are_409(make_daemon):
    d = make_daemon()
    assert http(d.address, "POST", "/checkpoint", {"image_dir": "x"})[0] == 409
    start(d)
    assert http(d.address, "POST", "/run", {"mode": "from_scratch", "workload": FAST_WORKLOAD})[0] == 409


def test_concurrent_mutation_rejected_while_in_flight(make_daemon):
    d = make_daemon()
    start(d, dict(FAST_WORKLOAD, phase_delay=1.0))
    results = {}

    def slow_checkpoint():
        results["ck"] = http(d.address, "POST", "/checkpoint", {"image_dir": "slow"})

    t = threading.Thread(target=slow_checkpoint)
    t.start()
    time.sleep(0.3)
    assert d.status()["operation_in_flight"]
    rejected = [http(d.address, "POST", "/checkpoint", {"image_dir": "c"}),
                http(d.address, "POST", "/run", {"mode": "from_scratch", "workload": FAST_WORKLOAD})]
    t.join(30)
    assert [r[0] for r in rejected] == [409, 409]
    assert results["ck"][0] == 200


def test_responses_arrive_after_completion(make_daemon):
    d = make_daemon()
    t0 = time.monotonic()
    body = start(d)
    assert time.monotonic() - t0 >= body["duration"]
    rec = [r for r in d.bus.records if r["op"] == "run"]
    assert rec and rec[-1]["op_id"] == body["op_id"]


def test_lost_completion_record_is_500(make_daemon):
    d = make_daemon(completion_timeout=0.5)
    d.bus.drop_next = 1
    status, body = http(d.address, "POST", "/run", {"mode": "from_scratch", "workload": FAST_WORKLOAD})
    assert status == 500 and "correlation" in body["error"]


def test_signal_exit_goes_standby_in_place(make_daemon):
    d = make_daemon()
    start(d)
    st = http(d.address, "POST", "/inject", {"kind": "signal", "signal": 15})
    assert st[0] == 202
    st = wait_state(d, "standby")
    assert st["current_config"]["mode"] == "standby" and st["exit_count"] == 1
    assert read_start_option(d.config.start_option_path)[0].generation == 1


def test_app_exit_restarts_from_scratch_in_place(make_daemon):
    d = make_daemon()
    start(d)
    pid_before = d.status()["service"]["os_pid"]
    http(d.address, "POST", "/inject", {"kind": "app_exit", "code": 3})
    deadline = time.monotonic() + 10
    while d.status()["service_restart_count"] < 1 and time.monotonic() < deadline:
        time.sleep(0.02)
    st = wait_state(d, "running")
    assert st["service_restart_count"] == 1 and st["service"]["os_pid"] != pid_before
    assert st["daemon_pid"] == os.getpid()


def test_checkpoint_storage_failure_keeps_service(make_daemon):
    from liquid import storage
    d = make_daemon()
    start(d)
    dest = d.config.shared_dir / "full"
    dest.mkdir(parents=True)
    storage.set_quota(dest, 10)
    status, body = http(d.address, "POST", "/checkpoint", {"image_dir": "full"})
    assert status == 500 and body["service_continues"] is True
    assert http(d.address, "GET", "/status")[1]["service_state"] == "running"


def test_armed_checkpoint_signal_stops_checkpoint(make_daemon):
    d = make_daemon()
    start(d)
    assert http(d.address, "POST", "/inject", {"kind": "signal", "signal": 9, "phase": "checkpoint"})[0] == 202
    status, body = http(d.address, "POST", "/checkpoint", {"image_dir": "k"})
    assert status == 500 and body["service_continues"] is False and body["next_mode"] == "standby"
    assert not (d.config.shared_dir / "k" / "BUNDLE_COMPLETE").exists()


def test_corrupt_bundle_restore_falls_back_to_scratch(make_daemon):
    d = make_daemon()
    start(d)
    http(d.address, "POST", "/checkpoint", {"image_dir": "b"})
    snap = d.config.shared_dir / "b" / "state" / "2.snap"
    snap.write_bytes(snap.read_bytes()[:-3] + b"xyz")
    status, body = http(d.address, "POST", "/run", {"mode": "restore", "bundle_location": "b"})
    assert status == 500 and body["next_mode"] == "from_scratch"
    assert wait_state(d, "running")["current_config"]["mode"] == "from_scratch"


def test_boot_restores_from_persisted_config(make_daemon, tmp_path):
    d = make_daemon("a")
    start(d)
    time.sleep(0.2)
    _, ck = http(d.address, "POST", "/checkpoint", {"image_dir": "b"})
    state = tmp_path / "b"
    state.mkdir()
    write_start_option(StartOptionConfig(StartupMode.RESTORE, (), ck["bundle_location"]),
                       state / "start_option.conf")
    e = make_daemon("b")
    st = wait_state(e, "running")
    assert st["service"]["start_counters"] == ck["counters"]


def test_malformed_config_boots_standby_and_persists_fallback(make_daemon, tmp_path):
    (tmp_path / "m").mkdir()
    (tmp_path / "m" / "start_option.conf").write_text("{{{")
    d = make_daemon("m")
    assert d.status()["service_state"] == "standby"
    cfg, err = read_start_option(d.config.start_option_path)
    assert err is None and cfg.reason == "malformed-config" and cfg.generation == 1


def test_crash_loop_guard_forces_standby(make_daemon, tmp_path):
    d = make_daemon(max_start_failures=3)
    status, body = http(d.address, "POST", "/run", {"mode": "from_scratch",
                                                     "app_command": [sys.executable, "-c", "raise SystemExit(1)"]})
    assert status == 500
    st = wait_state(d, "standby")
    assert st["current_config"]["reason"].startswith("crash-loop")
    assert st["exit_count"] == 3


def test_post_checkpoint_hooks_run_with_exit_report(make_daemon, tmp_path):
    out = tmp_path / "hook.out"
    hook = [sys.executable, "-c", f"import os; open({str(out)!r}, 'w').write(os.environ['LIQUID_EXIT_REPORT'])"]
    d = make_daemon(post_checkpoint_hooks=[hook])
    start(d)
    http(d.address, "POST", "/checkpoint", {"image_dir": "h"})
    rep = json.loads(out.read_text())
    assert rep["exit_code"] >= 128 and rep["phase"] == "checkpoint"


def test_config_from_file_and_env_override(tmp_path, monkeypatch):
    cfg = {"state_dir": str(tmp_path / "ignored"), "exposed_ports": 10,
           "startup_delay_model": {"base_seconds": 0.2, "per_port_seconds": 0.01}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    c = DaemonConfig.load(p)
    assert c.startup_delay == pytest.approx(0.3)
    assert DaemonConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()

    monkeypatch.setenv("LIQUIDD_STATE_DIR", str(tmp_path / "real"))
    env = dict(os.environ, PYTHONPATH=str(os.path.dirname(os.path.dirname(__file__)) + "/src"))
    proc = subprocess.Popen([sys.executable, "-m", "liquid.daemon", "--config", str(p)], env=env,
                            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        deadline = time.monotonic() + 10
        while not (tmp_path / "real" / "liquidd.addr").exists() and time.monotonic() < deadline:
            time.sleep(0.05)
        assert (tmp_path / "real" / "liquidd.addr").exists()
        assert not (tmp_path / "ignored").exists()
    finally:
        proc.terminate()
        assert proc.wait(10) == 0


def test_unwritable_state_dir_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"state_dir": str(blocker / "sub")}))
    assert liquidd_main(["--config", str(p)]) == 2


def test_busy_port_exits_3(tmp_path):
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen(1)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"state_dir": str(tmp_path / "s"), "listen_address": f"127.0.0.1:{s.getsockname()[1]}",
                             "startup_delay_model": {"base_seconds": 0, "per_port_seconds": 0}}))
    env = dict(os.environ, PYTHONPATH=str(os.path.dirname(os.path.dirname(__file__)) + "/src"))
    rc = subprocess.run([sys.executable, "-m", "liquid.daemon", "--config", str(p)], env=env,
                        capture_output=True, timeout=20).returncode
    s.close()
    assert rc == 3
