"""memhog-like toy service speaking the cooperative checkpoint protocol.

Run as ``python -m liquid.memhog``.  The supervisor passes the control
socket and virtual PIDs through the environment:

    LIQUID_CONTROL      unix socket path to connect to (supervisor listens)
    LIQUID_VPIDS        JSON list of virtual PIDs, root first (fresh start)
    LIQUID_RESTORE_DIR  bundle directory to resume from (restore)
    LIQUID_PID_MAP      JSON {old_vpid: new_vpid} used with LIQUID_RESTORE_DIR

Every process ticks a counter and prints one JSON log line per tick.  The
root forks the children, relays commands to them, and talks to the
supervisor with newline-delimited JSON.  Stdlib only, to keep startup cheap.
"""

import argparse
import json
import os
import random
import select
import signal
import socket
import sys
import time

from .storage import digest, write_bytes

STATE_DIR = "state"
TREE_FILE = os.path.join(STATE_DIR, "tree.json")


def snap_name(vpid):
    return os.path.join(STATE_DIR, f"{vpid}.snap")


def _send(sock, msg):
    sock.sendall(json.dumps(msg).encode() + b"\n")


class LineReader:
    def __init__(self, sock):
        self.sock = sock
        self.buf = b""

    def fill(self):
        """Read once; returns False on EOF."""
        try:
            data = self.sock.recv(65536)
        except (ConnectionResetError, OSError):
            return False
        if not data:
            return False
        self.buf += data
        return True

    def pop(self):
        if b"\n" not in self.buf:
            return None
        line, self.buf = self.buf.split(b"\n", 1)
        return json.loads(line)

    def read(self, timeout=None):
        while True:
            msg = self.pop()
            if msg is not None:
                return msg
            if timeout is not None:
                r, _, _ = select.select([self.sock], [], [], timeout)
                if not r:
                    raise TimeoutError
            if not self.fill():
                return None


class Proc:
    """State and tick loop of one memhog process."""

    def __init__(self, vpid, parent, label, tick, size, seed, counter=0,
                 phase_delay=0.0, expect_digest=None):
        self.vpid = vpid
        self.parent = parent
        self.label = label
        self.tick = tick
        self.size = size
        self.seed = seed
        self.counter = counter
        self.phase_delay = phase_delay
        self.expect_digest = expect_digest
        self.buffer_digest = None
        self.next_tick = None
        self.frozen = False

    def fill_memory(self):
        buf = random.Random(self.seed).randbytes(self.size) if self.size else b""
        self.buffer_digest = digest(buf)
        self._buf = buf  # hold the memory
        if self.expect_digest is not None and self.expect_digest != self.buffer_digest:
            raise ValueError(f"digest mismatch for vpid {self.vpid}")

    def start_ticking(self):
        self.next_tick = time.monotonic() + self.tick

    def timeout(self):
        if self.frozen or self.next_tick is None:
            return None
        return max(0.0, self.next_tick - time.monotonic())

    def maybe_tick(self):
        if self.frozen or self.next_tick is None:
            return
        now = time.monotonic()
        if now < self.next_tick:
            return
        self.counter += 1
        line = json.dumps({"ts": round(time.time(), 6), "pid": self.vpid, "label": self.label,
                           "counter": self.counter, "level": "info"})
        os.write(1, line.encode() + b"\n")
        self.next_tick += self.tick
        if self.next_tick < now:
            self.next_tick = now + self.tick

    def state(self):
        return {"vpid": self.vpid, "parent": self.parent, "label": self.label,
                "counter": self.counter, "seed": self.seed, "size": self.size,
                "digest": self.buffer_digest}

    def prepare(self, out_dir):
        """Freeze and serialize; returns the written state."""
        self.frozen = True
        if self.phase_delay:
            time.sleep(self.phase_delay)
        st = self.state()
        write_bytes(os.path.join(out_dir, snap_name(self.vpid)),
                    json.dumps(st, sort_keys=True).encode())
        return st

    def resume(self):
        self.frozen = False
        self.start_ticking()


def _remove_snaps(out_dir, vpids):
    for v in vpids:
        try:
            os.unlink(os.path.join(out_dir, snap_name(v)))
        except OSError:
            pass


def child_main(proc, sock):
    reader = LineReader(sock)
    root_pid = os.getppid()
    try:
        if proc.phase_delay and proc.expect_digest is not None:
            time.sleep(proc.phase_delay)
        proc.fill_memory()
    except Exception as exc:
        _send(sock, {"ok": False, "error": "corrupt", "detail": str(exc)})
        os._exit(1)
    _send(sock, {"ok": True, "os_pid": os.getpid(), "counter": proc.counter,
                 "digest": proc.buffer_digest})
    proc.start_ticking()
    while True:
        to = proc.timeout()
        r, _, _ = select.select([sock], [], [], 1.0 if to is None else min(to, 1.0))
        if r:
            if not reader.fill():
                os._exit(0)
            while True:
                msg = reader.pop()
                if msg is None:
                    break
                cmd = msg.get("cmd")
                if cmd == "prepare":
                    try:
                        proc.prepare(msg["out_dir"])
                        _send(sock, {"ok": True, "state": proc.state()})
                    except OSError as exc:
                        _send(sock, {"ok": False, "error": "storage", "detail": str(exc)})
                elif cmd == "abort":
                    proc.resume()
                    _send(sock, {"ok": True})
                elif cmd == "exit":
                    os._exit(int(msg.get("code", 0)))
        if os.getppid() != root_pid:
            os._exit(0)
        proc.maybe_tick()


class Root:
    def __init__(self, procs, control):
        self.procs = procs  # root first
        self.me = procs[0]
        self.control = control
        self.creader = LineReader(control)
        self.children = {}  # vpid -> (os_pid, sock, reader)

    def fork_children(self):
        for proc in self.procs[1:]:
            a, b = socket.socketpair()
            pid = os.fork()
            if pid == 0:
                a.close()
                self.control.close()
                for _, s, _ in self.children.values():
                    s.close()
                try:
                    child_main(proc, b)
                finally:
                    os._exit(0)
            b.close()
            self.children[proc.vpid] = (pid, a, LineReader(a))

    def kill_children(self):
        for pid, sock, _ in self.children.values():
            try:
                _send(sock, {"cmd": "exit", "code": 0})
            except OSError:
                pass
        for pid, _, _ in self.children.values():
            try:
                os.waitpid(pid, 0)
            except ChildProcessError:
                pass

    def broadcast(self, msg):
        replies = {}
        for vpid, (_, sock, reader) in self.children.items():
            _send(sock, msg)
        for vpid, (_, sock, reader) in self.children.items():
            replies[vpid] = reader.read()
        return replies

    def await_ready(self):
        counters = {self.me.vpid: self.me.counter}
        os_pids = {self.me.vpid: os.getpid()}
        self.digests = {self.me.vpid: self.me.buffer_digest}
        errors = []
        for vpid, (pid, _, reader) in self.children.items():
            msg = reader.read(timeout=60)
            if not msg or not msg.get("ok"):
                errors.append((msg or {}).get("detail", f"child {vpid} died"))
            else:
                os_pids[vpid] = msg["os_pid"]
                counters[vpid] = msg["counter"]
                self.digests[vpid] = msg["digest"]
        return counters, os_pids, errors

    def checkpoint(self, out_dir):
        if self.me.frozen:
            return {"ok": False, "error": "refused", "detail": "checkpoint already in progress"}
        states, failure = {}, None
        try:
            os.makedirs(os.path.join(out_dir, STATE_DIR), exist_ok=True)
        except OSError as exc:
            return {"ok": False, "error": "storage", "detail": str(exc)}
        for _, sock, _ in self.children.values():
            _send(sock, {"cmd": "prepare", "out_dir": out_dir})
        try:
            states[self.me.vpid] = self.me.prepare(out_dir)
        except OSError as exc:
            self.me.frozen = True
            failure = str(exc)
        for vpid, (_, _, reader) in self.children.items():
            msg = reader.read()
            if msg is None:
                failure = failure or f"child {vpid} died during checkpoint"
            elif msg.get("ok"):
                states[vpid] = msg["state"]
            else:
                failure = failure or msg.get("detail", "child failure")
        if failure is None:
            tree = {"vpids": [p.vpid for p in self.procs],
                    "edges": [[p.parent, p.vpid] for p in self.procs[1:]]}
            try:
                write_bytes(os.path.join(out_dir, TREE_FILE), json.dumps(tree).encode())
            except OSError as exc:
                failure = str(exc)
        if failure is not None:
            _remove_snaps(out_dir, [p.vpid for p in self.procs])
            try:
                os.unlink(os.path.join(out_dir, TREE_FILE))
            except OSError:
                pass
            self.broadcast({"cmd": "abort"})
            self.me.resume()
            return {"ok": False, "error": "storage", "detail": failure}
        return {"ok": True, "state": {"processes": [states[p.vpid] for p in self.procs]}}

    def abort(self):
        if self.me.frozen:
            self.broadcast({"cmd": "abort"})
            self.me.resume()
        return {"ok": True}

    def on_child_eof(self, vpid):
        pid = self.children[vpid][0]
        _, status = os.waitpid(pid, 0)
        del self.children[vpid]
        self.kill_children()
        if os.WIFSIGNALED(status):
            sig = os.WTERMSIG(status)
            signal.signal(sig, signal.SIG_DFL)
            os.kill(os.getpid(), sig)
        os._exit(os.WEXITSTATUS(status) or 1)

    def loop(self):
        ppid = os.getppid()
        while True:
            socks = [self.control] + [s for _, s, _ in self.children.values()]
            to = self.me.timeout()
            r, _, _ = select.select(socks, [], [], 1.0 if to is None else min(to, 1.0))
            for s in r:
                if s is self.control:
                    if not self.creader.fill():
                        self.kill_children()
                        os._exit(0)
                    while True:
                        msg = self.creader.pop()
                        if msg is None:
                            break
                        self.handle(msg)
                else:
                    vpid = next(v for v, (_, cs, _) in self.children.items() if cs is s)
                    self.on_child_eof(vpid)
            if os.getppid() != ppid:
                self.kill_children()
                os._exit(0)
            self.me.maybe_tick()

    def handle(self, msg):
        cmd = msg.get("cmd")
        if cmd == "checkpoint":
            _send(self.control, self.checkpoint(msg["out_dir"]))
        elif cmd == "abort":
            _send(self.control, self.abort())
        elif cmd == "commit":
            self.kill_children()
            _send(self.control, {"ok": True})
            signal.signal(signal.SIGTERM, signal.SIG_DFL)
            os.kill(os.getpid(), signal.SIGTERM)
            time.sleep(5)
        elif cmd == "exit":
            self.kill_children()
            _send(self.control, {"ok": True})
            os._exit(int(msg.get("code", 0)))
        elif cmd == "status":
            _send(self.control, {"ok": True, "frozen": self.me.frozen,
                                 "counters": {self.me.vpid: self.me.counter}})
        else:
            _send(self.control, {"ok": False, "error": "unknown", "detail": str(cmd)})


def parse_args(argv=None):
    ap = argparse.ArgumentParser(prog="memhog")
    ap.add_argument("--processes", type=int, default=1)
    ap.add_argument("--footprint", type=int, default=0, help="total bytes across the tree")
    ap.add_argument("--tick", type=float, default=1.0)
    ap.add_argument("--ports", type=int, default=0)
    ap.add_argument("--label", default="memhog")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--phase-delay", type=float, default=0.0)
    return ap.parse_args(argv)


def build_procs(args):
    restore_dir = os.environ.get("LIQUID_RESTORE_DIR")
    if restore_dir:
        pid_map = {int(k): int(v) for k, v in json.loads(os.environ["LIQUID_PID_MAP"]).items()}
        with open(os.path.join(restore_dir, TREE_FILE), "rb") as fh:
            order = json.load(fh)["vpids"]
        procs = []
        for old in order:
            with open(os.path.join(restore_dir, snap_name(old)), "rb") as fh:
                st = json.load(fh)
            parent = st["parent"]
            procs.append(Proc(pid_map[st["vpid"]], pid_map[parent] if parent else None,
                              st["label"], args.tick, st["size"], st["seed"], st["counter"],
                              args.phase_delay, expect_digest=st["digest"]))
        return procs
    vpids = json.loads(os.environ["LIQUID_VPIDS"])
    if len(vpids) != args.processes:
        raise SystemExit(f"memhog: expected {args.processes} vpids, got {len(vpids)}")
    share = args.footprint // args.processes
    root = vpids[0]
    return [Proc(v, None if i == 0 else root, args.label, args.tick, share,
                 args.seed * 1_000_003 + i, 0, args.phase_delay)
            for i, v in enumerate(vpids)]


def main(argv=None):
    args = parse_args(argv)
    if args.processes < 1 or args.tick <= 0:
        print("memhog: invalid spec", file=sys.stderr)
        return 2
    procs = build_procs(args)
    control = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    control.connect(os.environ["LIQUID_CONTROL"])
    root = Root(procs, control)
    root.fork_children()
    errors = []
    try:
        if root.me.phase_delay and root.me.expect_digest is not None:
            time.sleep(root.me.phase_delay)
        root.me.fill_memory()
    except Exception as exc:
        errors.append(str(exc))
    counters, os_pids, child_errors = root.await_ready()
    errors += child_errors
    if errors:
        _send(control, {"event": "error", "error": "corrupt", "detail": "; ".join(errors)})
        root.kill_children()
        return 1
    _send(control, {
        "event": "ready",
        "vpids": [p.vpid for p in procs],
        "os_pids": os_pids,
        "counters": counters,
        "tree": [[p.parent, p.vpid] for p in procs[1:]],
        "digests": root.digests,
    })
    root.me.start_ticking()
    root.loop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
