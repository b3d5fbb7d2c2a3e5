"""Benchmark scenarios: restore time against process count, migration time
against exposed ports (warm and cold), and fault-handler overhead.

A scenario is a JSON document::

    {"variable": "process_count" | "ports" | "handler_complexity",
     "values": [...], "repetitions": 30, "seed": 0, ...}

Every value gets ``repetitions`` measurements; repetitions are interleaved
across values so slow drift in the host does not line up with one value.
"""

from __future__ import annotations

import json
import logging
import math
import random
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from scipy import stats as sstats

from . import engine
from .orchestrator import Api, LocalDaemon, MigrationPlan, migrate_once
from .pidspace import VirtualPidSpace
from .workload import WorkloadSpec, spawn_workload

log = logging.getLogger(__name__)

VARIABLES = ("process_count", "ports", "handler_complexity")
CI_METHOD = "t-interval (two-sided 95%, n-1 degrees of freedom)"
MAX_CONSECUTIVE_FAILURES = 3
PID_MAX = 32768
PID_FLOOR = 300


class ScenarioAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class Row:
    series: str
    value: str
    mean: float
    ci_low: float
    ci_high: float
    n: int


@dataclass
class BenchResult:
    variable: str
    rows: list = field(default_factory=list)
    samples: list = field(default_factory=list)   # (series, value, rep, seconds)
    extras: dict = field(default_factory=dict)
    failures: int = 0
    aborted: Optional[str] = None
    ci_method: str = CI_METHOD
    y_label: str = "seconds"
    x_label: str = ""

    def series(self, name: str) -> list:
        return [r for r in self.rows if r.series == name]

    def means(self, name: str) -> dict:
        return {r.value: r.mean for r in self.series(name)}


def mean_ci(xs, confidence: float = 0.95) -> tuple:
    """Mean and two-sided t-interval."""
    n = len(xs)
    if n == 0:
        raise ValueError("no samples")
    m = sum(xs) / n
    if n == 1:
        return m, m, m
    sd = math.sqrt(sum((x - m) ** 2 for x in xs) / (n - 1))
    half = sstats.t.ppf(0.5 + confidence / 2, n - 1) * sd / math.sqrt(n)
    return m, m - half, m + half


def summarize(result: BenchResult, series_order, values) -> None:
    for s in series_order:
        for v in values:
            xs = [x for (ss, vv, _, x) in result.samples if ss == s and vv == str(v)]
            if xs:
                m, lo, hi = mean_ci(xs)
                result.rows.append(Row(s, str(v), m, lo, hi, len(xs)))


class _FailureGuard:
    def __init__(self, result: BenchResult):
        self.result = result
        self.streak = 0

    def ok(self):
        self.streak = 0

    def failed(self, what: str):
        self.result.failures += 1
        self.streak += 1
        log.warning("benchmark step failed: %s", what)
        if self.streak >= MAX_CONSECUTIVE_FAILURES:
            raise ScenarioAborted(f"{MAX_CONSECUTIVE_FAILURES} consecutive infrastructure failures; last: {what}")


def load_scenario(path) -> dict:
    doc = json.loads(Path(path).read_text())
    validate_scenario(doc)
    return doc


def validate_scenario(doc: dict) -> None:
    if doc.get("variable") not in VARIABLES:
        raise ValueError(f"variable must be one of {VARIABLES}")
    if not doc.get("values"):
        raise ValueError("scenario values must be non-empty")
    if int(doc.get("repetitions", 30)) < 1:
        raise ValueError("repetitions must be >= 1")


def run_benchmark(scenario: dict, work_dir=None, progress=None) -> BenchResult:
    validate_scenario(scenario)
    runner = {"process_count": _bench_process_count, "ports": _bench_ports,
              "handler_complexity": _bench_handlers}[scenario["variable"]]
    own = work_dir is None
    work = Path(work_dir or tempfile.mkdtemp(prefix="liquid-bench-"))
    work.mkdir(parents=True, exist_ok=True)
    result = BenchResult(scenario["variable"])
    result.extras["repetitions"] = int(scenario.get("repetitions", 30))
    try:
        runner(scenario, work, result, progress or (lambda *_: None))
    except ScenarioAborted as exc:
        result.aborted = str(exc)
    finally:
        if own:
            shutil.rmtree(work, ignore_errors=True)
    return result


# ---- process count: PID reservation cost ------------------------------------

def _bench_process_count(sc: dict, work: Path, result: BenchResult, progress) -> None:
    values = [int(v) for v in sc["values"]]
    reps = int(sc.get("repetitions", 30))
    fork_cost = float(sc.get("fork_cost_seconds", 0.001))
    footprint = int(sc.get("memory_footprint_bytes", 1 << 20))
    rng = random.Random(sc.get("seed", 0))
    guard = _FailureGuard(result)
    result.x_label, result.y_label = "number of processes", "restore time (s)"
    result.extras.update(fork_cost_seconds=fork_cost, pid_max=PID_MAX)
    iterations = {}
    for rep in range(reps):
        for k in values:
            targets = rng.sample(range(PID_FLOOR, PID_MAX), k)
            start_pid = rng.randrange(PID_FLOOR, PID_MAX)
            bundle = work / f"pc-{rep}-{k}"
            try:
                handle = spawn_workload(WorkloadSpec(process_count=k, memory_footprint_bytes=footprint * k),
                                        work / "ctl.sock", targets)
                engine.checkpoint(handle, bundle)
            except Exception as exc:  # noqa: BLE001 - counted as an infrastructure failure
                guard.failed(f"checkpoint k={k}: {exc}")
                continue
            for privileged in (False, True):
                name = "privileged" if privileged else "unprivileged"
                space = VirtualPidSpace(last_pid=start_pid, privileged=privileged)
                try:
                    t0 = time.perf_counter()
                    res = engine.restore(bundle, space, work / "ctl.sock", fork_cost=fork_cost,
                                         fork_cost_mode="account")
                    wall = time.perf_counter() - t0
                    res.handle.kill()
                except Exception as exc:  # noqa: BLE001
                    guard.failed(f"restore k={k} {name}: {exc}")
                    continue
                guard.ok()
                result.samples.append((name, str(k), rep, wall + res.reservation_seconds))
                iterations.setdefault((name, k), []).append(res.cost.fork_iterations)
            shutil.rmtree(bundle, ignore_errors=True)
            progress(f"process_count rep={rep} k={k}")
    result.extras["mean_fork_iterations"] = {f"{n}:{k}": sum(v) / len(v) for (n, k), v in sorted(iterations.items())}
    summarize(result, ("unprivileged", "privileged"), values)


# ---- ports: warm vs cold ---------------------------------------------------

def _daemon_base(sc: dict, shared: Path) -> dict:
    model = sc.get("startup_delay_model", {"base_seconds": 0.5, "per_port_seconds": 0.05})
    return {"shared_dir": str(shared), "startup_delay_model": model, "poll_interval": 0.01}


def _start_service(api: Api, workload: dict) -> None:
    status, body = api.run(mode="from_scratch", workload=workload)
    if status != 200:
        raise RuntimeError(f"source start failed: {body}")


def _bench_ports(sc: dict, work: Path, result: BenchResult, progress) -> None:
    values = [int(v) for v in sc["values"]]
    reps = int(sc.get("repetitions", 30))
    delay = float(sc.get("transfer_delay", 3.0))
    modes = sc.get("modes", ["cold", "warm"])
    workload = sc.get("workload", {"process_count": 2, "memory_footprint_bytes": 1 << 20, "tick_interval": 0.05})
    shared = work / "shared"
    shared.mkdir(exist_ok=True)
    base = _daemon_base(sc, shared)
    result.x_label, result.y_label = "exposed ports", "migration time (s)"
    result.extras.update(transfer_delay=delay, startup_delay_model=base["startup_delay_model"])
    guard = _FailureGuard(result)
    source = LocalDaemon(dict(base, startup_delay_model={"base_seconds": 0, "per_port_seconds": 0}),
                         work / "source").launch()
    pairs = {}
    components = {}
    try:
        source.wait_ready()
        api = source.api
        for rep in range(reps):
            for ports in values:
                for mode in modes:
                    try:
                        api.wait_for(lambda s: s["service_state"] == "standby" or s["service_state"] == "running")
                        if api.status()["service_state"] != "running":
                            _start_service(api, workload)
                        time.sleep(0.1)
                        plan = MigrationPlan(source.address, shared, dest_config=base, warm=(mode == "warm"),
                                             ports=ports, transfer_delay=delay, dest_state_root=work / "dest")
                        rep_, dest = migrate_once(plan, api, tag=f"p{ports}-{mode}-{rep}")
                    except Exception as exc:  # noqa: BLE001
                        guard.failed(f"ports={ports} {mode}: {exc}")
                        continue
                    if dest is not None:
                        dest.stop()
                        shutil.rmtree(dest.state_dir, ignore_errors=True)
                    shutil.rmtree(shared / f"p{ports}-{mode}-{rep}", ignore_errors=True)
                    if not rep_.ok:
                        guard.failed(f"ports={ports} {mode}: {rep_.failed_phase}: {rep_.error}")
                        continue
                    guard.ok()
                    result.samples.append((mode, str(ports), rep, rep_.total_duration))
                    pairs.setdefault(str(ports), {}).setdefault(rep, {})[mode] = rep_.total_duration
                    components.setdefault((mode, ports), []).append(
                        [rep_.checkpoint_duration, rep_.transfer_duration,
                         rep_.destination_startup_duration, rep_.restore_duration])
                    progress(f"ports rep={rep} ports={ports} {mode} total={rep_.total_duration:.3f}")
    finally:
        source.stop()
    result.extras["pairs"] = {p: [[r, d.get("warm"), d.get("cold")] for r, d in sorted(by.items())]
                              for p, by in pairs.items()}
    result.extras["mean_components"] = {
        f"{m}:{p}": [round(sum(c[i] for c in cs) / len(cs), 6) for i in range(4)]
        for (m, p), cs in sorted(components.items())}
    summarize(result, modes, values)


# ---- handler complexity ---------------------------------------------------

_PATHS = ("/", "/index.html", "/api/v1/items", "/static/app.js", "/login", "/img/logo.png", "/search?q=x")


def synthetic_access_log(n: int, seed: int = 0) -> list:
    """Deterministic access-log lines in the common combined format."""
    rng = random.Random(seed)
    clients = [f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(1, 255)}" for _ in range(64)]
    lines = []
    for i in range(n):
        status = rng.choice((200, 200, 200, 200, 304, 404, 500))
        lines.append(f'{rng.choice(clients)} - - [16/Oct/2026:10:{(i // 60) % 60:02d}:{i % 60:02d} +0000] '
                     f'"GET {rng.choice(_PATHS)} HTTP/1.1" {status} {rng.randrange(100, 50000)} '
                     f'"-" "Mozilla/5.0"')
    return lines


def hook_policy(complexity: str, timeout: float = 30.0) -> dict:
    if complexity == "none":
        return {"kind": "builtin_default"}
    return {"kind": "external_hook", "hook_command": [sys.executable, "-m", "liquid.hooks", "--complexity", complexity],
            "hook_timeout": timeout, "log_window": 2000}


def _bench_handlers(sc: dict, work: Path, result: BenchResult, progress) -> None:
    values = [str(v) for v in sc["values"]]
    reps = int(sc.get("repetitions", 30))
    n_lines = int(sc.get("log_lines", 2000))
    workload = sc.get("workload", {"process_count": 2, "memory_footprint_bytes": 1 << 20, "tick_interval": 0.1})
    shared = work / "shared"
    shared.mkdir(exist_ok=True)
    prefill = work / "access.log"
    prefill.write_text("\n".join(synthetic_access_log(n_lines, sc.get("seed", 0))) + "\n")
    result.x_label, result.y_label = "fault handler complexity", "migration time (s)"
    result.extras.update(log_lines=n_lines)
    guard = _FailureGuard(result)
    pairs = {}
    try:
        for v in values:
            cfg = dict(_daemon_base({"startup_delay_model": {"base_seconds": 0, "per_port_seconds": 0}}, shared),
                       fault_policy=hook_policy(v), log_prefill=str(prefill), log_bound=n_lines)
            a = LocalDaemon(cfg, work / f"h-{v}-a").launch()
            b = LocalDaemon(cfg, work / f"h-{v}-b").launch()
            pairs[v] = [a, b]
            a.wait_ready()
            b.wait_ready()
            _start_service(a.api, workload)
        for rep in range(reps):
            for v in values:
                tag = f"h-{v}-{rep}"
                try:
                    a, b = pairs[v]
                    src, dst = (a, b) if a.api.status()["service_state"] == "running" else (b, a)
                    time.sleep(0.1)
                    plan = MigrationPlan(src.address, shared, destination=dst.address, warm=True)
                    rep_, _ = migrate_once(plan, src.api, tag=tag)
                except Exception as exc:  # noqa: BLE001
                    guard.failed(f"handler={v}: {exc}")
                    _recover_pair(pairs[v], workload)
                    continue
                shutil.rmtree(shared / tag, ignore_errors=True)
                if not rep_.ok:
                    guard.failed(f"handler={v}: {rep_.failed_phase}: {rep_.error}")
                    _recover_pair(pairs[v], workload)
                    continue
                guard.ok()
                result.samples.append((v, v, rep, rep_.total_duration))
                progress(f"handler rep={rep} {v} total={rep_.total_duration:.3f}")
        decision = {}
        for v in values:
            m = pairs[v][0].api.metrics()
            m2 = pairs[v][1].api.metrics()
            count = m.get("fault_decision_seconds_count", 0) + m2.get("fault_decision_seconds_count", 0)
            total = m.get("fault_decision_seconds_sum", 0) + m2.get("fault_decision_seconds_sum", 0)
            decision[v] = total / count if count else None
        result.extras["mean_fault_decision_seconds"] = decision
    finally:
        for pair in pairs.values():
            for d in pair:
                d.stop()
    # one series per handler so the figure can show each as its own point
    for v in values:
        xs = [x for (s, _, _, x) in result.samples if s == v]
        if xs:
            m, lo, hi = mean_ci(xs)
            result.rows.append(Row("migration", v, m, lo, hi, len(xs)))
    base = result.means("migration").get("none")
    if base is not None:
        result.extras["overhead_vs_none"] = {v: m - base for v, m in result.means("migration").items() if v != "none"}


def _recover_pair(pair, workload) -> None:
    """Leave exactly one side of a ping-pong pair running, so the next rep can proceed."""
    try:
        states = [d.api.status()["service_state"] for d in pair]
        if "running" not in states:
            _start_service(pair[0].api, workload)
    except Exception:  # noqa: BLE001
        pass
