import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from liquid.cli import build_parser, main

SRC = str(Path(__file__).resolve().parent.parent / "src")


def test_parser_shapes():
    p = build_parser()
    a = p.parse_args(["migrate", "--source", "h:1", "--dest-config", "c", "--shared-dir", "s", "--cold",
                      "--ports", "5", "--transfer-delay", "1.5"])
    assert (a.warm, a.ports, a.transfer_delay) == (False, 5, 1.5)
    assert p.parse_args(["migrate", "--source", "h:1", "--dest-config", "c", "--shared-dir", "s"]).warm
    with pytest.raises(SystemExit):
        p.parse_args(["migrate", "--source", "h:1", "--dest-config", "c", "--shared-dir", "s", "--warm", "--cold"])


def test_invalid_cell_exits_nonzero():
    assert main(["inject", "--target", "127.0.0.1:1", "--fault", "corrupt_bundle", "--phase", "normal"]) == 2


def test_unreachable_target_exits_nonzero():
    assert main(["inject", "--target", "127.0.0.1:1", "--fault", "signal", "--phase", "normal"]) == 1


def test_bench_end_to_end(tmp_path):
    sc = tmp_path / "sc.json"
    sc.write_text(json.dumps({"variable": "process_count", "values": [2], "repetitions": 2,
                              "memory_footprint_bytes": 10000}))
    env = dict(os.environ, PYTHONPATH=SRC)
    proc = subprocess.run([sys.executable, "-m", "liquid.cli", "bench", "--scenario", str(sc), "--out",
                           str(tmp_path / "out")], env=env, capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.splitlines()[0] == "series,value,mean,ci_low,ci_high,n"
    assert {p.name for p in (tmp_path / "out").iterdir()} == {"results.csv", "samples.csv", "summary.txt",
                                                              "figure.png"}


def test_migrate_end_to_end(tmp_path):
    from liquid.orchestrator import LocalDaemon
    shared = tmp_path / "shared"
    shared.mkdir()
    nodelay = {"startup_delay_model": {"base_seconds": 0, "per_port_seconds": 0}, "shared_dir": str(shared)}
    src = LocalDaemon(nodelay, tmp_path / "src").launch()
    src.wait_ready()
    try:
        src.api.run(mode="from_scratch", workload={"process_count": 2, "tick_interval": 0.05})
        cfg = tmp_path / "dst.json"
        cfg.write_text(json.dumps(dict(nodelay, startup_delay_model={"base_seconds": 0.2, "per_port_seconds": 0.01})))
        env = dict(os.environ, PYTHONPATH=SRC)
        proc = subprocess.run([sys.executable, "-m", "liquid.cli", "migrate", "--source", src.address,
                               "--dest-config", str(cfg), "--shared-dir", str(shared), "--cold", "--ports", "10",
                               "--repetitions", "2"], env=env, capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        rows = proc.stdout.splitlines()
        assert len(rows) == 3 and rows[1].split(",")[1] == "True"
        startup = float(rows[1].split(",")[6])
        assert startup >= 0.3
    finally:
        src.stop()
        subprocess.run(["pkill", "-f", str(shared)], check=False)
