"""Fault-handling hook programs of graded cost, for overhead measurements.

``python -m liquid.hooks --complexity {o1,on,on2,on3}`` reads the hook input
document on stdin, scans the log window with the requested asymptotic cost
in the number of lines, and prints the exit-code decision.  The scan result
only annotates ``reason``.
"""

import argparse
import json
import sys

import numpy as np

COMPLEXITIES = ("o1", "on", "on2", "on3")


def _text(entry):
    return entry if isinstance(entry, str) else json.dumps(entry, sort_keys=True)


def client_keys(lines):
    """First whitespace field of each line (the client address in access logs)."""
    keys = [_text(line).split(" ", 1)[0] for line in lines]
    _, inverse = np.unique(np.array(keys, dtype=object), return_inverse=True)
    return inverse


def scan(lines, complexity):
    n = len(lines)
    if complexity == "o1":
        return len(_text(lines[-1])) if n else 0
    if complexity == "on":
        return sum(1 for line in lines if '" 5' in _text(line) or "error" in _text(line))
    keys = client_keys(lines)
    same = (keys[:, None] == keys[None, :])
    if complexity == "on2":
        return int(same.sum())
    # two-hop paths between lines sharing a client: a dense n x n x n product
    m = same.astype(np.float32)
    return float((m @ m).sum())


def decide(exit_code, prior):
    if exit_code == 0 and prior.get("checkpoint_location"):
        return "restore"
    if 128 <= exit_code <= 159:
        return "standby"
    return "from_scratch"


def main(argv=None):
    ap = argparse.ArgumentParser(prog="liquid-hook")
    ap.add_argument("--complexity", choices=COMPLEXITIES, default="on")
    args = ap.parse_args(argv)
    doc = json.load(sys.stdin)
    report = doc["exit_report"]
    prior = doc.get("start_option") or {}
    value = scan(doc.get("logs", []), args.complexity)
    mode = decide(int(report["exit_code"]), prior)
    out = {"mode": mode, "reason": f"hook-{args.complexity}:{value}"}
    if mode == "restore":
        out["checkpoint_location"] = prior["checkpoint_location"]
    json.dump(out, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
