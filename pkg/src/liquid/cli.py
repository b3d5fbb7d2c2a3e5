"""liquidctl: migrate a service, inject faults, and run benchmarks.

Every subcommand exits 0 only if all of its checks passed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
from pathlib import Path

from .errors import InvalidInjection, LiquidError
from .lifecycle import Phase

MIGRATION_COLUMNS = ("rep", "ok", "warm", "ports", "checkpoint_duration", "transfer_duration",
                     "destination_startup_duration", "restore_duration", "total_duration", "downtime",
                     "fork_iterations_total", "continuity", "failed_phase", "destination")


def _cmd_migrate(args) -> int:
    from .orchestrator import MigrationPlan, migrate

    dest_config = json.loads(Path(args.dest_config).read_text())
    workload = json.loads(args.workload) if args.workload else None
    plan = MigrationPlan(args.source, Path(args.shared_dir).resolve(), dest_config=dest_config, warm=args.warm,
                         workload=workload, repetitions=args.repetitions, ports=args.ports,
                         transfer_delay=args.transfer_delay)
    reports = migrate(plan)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(MIGRATION_COLUMNS)
    for i, rep in enumerate(reports):
        d = rep.to_dict()
        d["rep"] = i
        w.writerow([f"{d[c]:.6f}" if isinstance(d[c], float) else d[c] for c in MIGRATION_COLUMNS])
        if not rep.ok:
            print(f"# rep {i} failed during {rep.failed_phase}: {rep.error}", file=sys.stderr)
    return 0 if all(r.ok for r in reports) else 1


def _cmd_inject(args) -> int:
    from .orchestrator import FaultInjection, FaultKind, FaultTarget, LocalDaemon, inject_fault

    try:
        injection = FaultInjection(FaultKind(args.fault), Phase(args.phase), signal=args.signal, code=args.code)
    except (ValueError, InvalidInjection) as exc:
        print(f"liquidctl: {exc}", file=sys.stderr)
        return 2
    daemon = LocalDaemon.attach(args.target)
    st = daemon.api.status()
    if args.workload:
        workload = json.loads(args.workload)
    else:
        workload = (st.get("service") or {}).get("app_command") or list(st["current_config"]["app_command"])
    if not workload:
        print("liquidctl: no workload known to the target; pass --workload", file=sys.stderr)
        return 2
    shared = Path(args.shared_dir or st["shared_dir"])
    ok = True
    for i in range(args.repeat):
        res = inject_fault(FaultTarget(daemon, workload, shared), injection)
        print(json.dumps({"attempt": i, **res.__dict__}, sort_keys=True))
        ok = ok and res.passed
    return 0 if ok else 1


def _cmd_bench(args) -> int:
    from .bench import load_scenario, run_benchmark
    from .report import render

    scenario = load_scenario(args.scenario)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = run_benchmark(scenario, progress=progress)
    paths = render(result, args.out)
    sys.stdout.write(Path(paths["results.csv"]).read_text())
    for name, path in sorted(paths.items()):
        print(f"# wrote {path}", file=sys.stderr)
    if result.aborted:
        print(f"# aborted: {result.aborted}", file=sys.stderr)
    return 0 if result.aborted is None and result.failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liquidctl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    m = sub.add_parser("migrate", help="stop-and-copy migrate the source's service to a new daemon")
    m.add_argument("--source", required=True, help="source daemon address host:port")
    m.add_argument("--dest-config", required=True, help="DaemonConfig (JSON) for the destination daemon")
    m.add_argument("--shared-dir", required=True)
    g = m.add_mutually_exclusive_group()
    g.add_argument("--warm", dest="warm", action="store_true", default=True)
    g.add_argument("--cold", dest="warm", action="store_false")
    m.add_argument("--ports", type=int, default=None)
    m.add_argument("--transfer-delay", type=float, default=0.0, metavar="SECS")
    m.add_argument("--repetitions", type=int, default=1)
    m.add_argument("--workload", help="WorkloadSpec JSON used to restart the source between repetitions")
    m.set_defaults(fn=_cmd_migrate)

    i = sub.add_parser("inject", help="inject one fault and check the resulting behaviour")
    i.add_argument("--target", required=True, help="daemon address host:port")
    i.add_argument("--fault", required=True, choices=["signal", "app_exit", "corrupt_bundle", "storage_exceed",
                                                       "network_unreachable", "hard_kill_daemon"])
    i.add_argument("--phase", required=True, choices=[p.value for p in Phase])
    i.add_argument("--signal", type=int, default=int(signal.SIGKILL))
    i.add_argument("--code", type=int, default=5, help="exit code for app_exit")
    i.add_argument("--repeat", type=int, default=1)
    i.add_argument("--workload", help="WorkloadSpec JSON to (re)start the service with")
    i.add_argument("--shared-dir")
    i.set_defaults(fn=_cmd_inject)

    b = sub.add_parser("bench", help="run a benchmark scenario and render its report")
    b.add_argument("--scenario", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=_cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (LiquidError, ValueError, OSError) as exc:
        print(f"liquidctl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
