"""HTTP control interface and the local-socket completion bus.

Mutating endpoints are synchronous: the handler starts the operation on a
worker thread and replies only once that operation's completion record has
arrived on the unix-domain IPC socket.

    POST /run          start, restore, or consult the Start Option Config
    POST /checkpoint   checkpoint the running service into the shared dir
    POST /inject       deliver or arm a fault (signal, app_exit, hard_kill_daemon)
    GET  /status       lock-free daemon status
    GET  /metrics      ``name value`` lines
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
import uuid
from pathlib import Path
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from .errors import OperationInFlight
from .workload import _short_socket_path

log = logging.getLogger(__name__)


class _Waiter:
    def __init__(self):
        self.event = threading.Event()
        self.record: Optional[dict] = None

    def wait(self, timeout: float) -> Optional[dict]:
        if self.event.wait(timeout):
            return self.record
        return None


class CompletionBus:
    """Listener on the IPC socket that hands completion records to waiters."""

    def __init__(self, path):
        self.path = _short_socket_path(Path(path))
        self.records: list = []
        self.drop_next = 0  # test hook: number of records to lose
        self._waiters: dict = {}
        self._lock = threading.Lock()
        self._closed = False
        self._server: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._bind()
        self._thread = threading.Thread(target=self._listen, name="completion-listener", daemon=True)
        self._thread.start()

    def _bind(self) -> None:
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        srv.bind(self.path)
        srv.listen(16)
        self._server = srv

    def _listen(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._server.accept()
            except OSError:
                if self._closed:
                    return
                log.warning("completion listener socket error; rebinding")
                time.sleep(0.1)
                try:
                    self._bind()
                except OSError:
                    pass
                continue
            threading.Thread(target=self._drain, args=(conn,), daemon=True).start()

    def _drain(self, conn: socket.socket) -> None:
        buf = b""
        with conn:
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                buf += chunk
        for line in buf.splitlines():
            try:
                rec = json.loads(line)
            except ValueError:
                continue
            self._deliver(rec)

    def _deliver(self, rec: dict) -> None:
        with self._lock:
            self.records.append({k: rec[k] for k in ("op_id", "op", "outcome", "duration") if k in rec})
            waiter = self._waiters.pop(rec.get("op_id"), None)
        if waiter is not None:
            waiter.record = rec
            waiter.event.set()

    def register(self, op_id: str) -> _Waiter:
        w = _Waiter()
        with self._lock:
            self._waiters[op_id] = w
        return w

    def forget(self, op_id: str) -> None:
        with self._lock:
            self._waiters.pop(op_id, None)

    def signal(self, record: dict) -> None:
        """Write one completion record to the IPC socket."""
        with self._lock:
            if self.drop_next:
                self.drop_next -= 1
                return
        try:
            with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
                s.connect(self.path)
                s.sendall(json.dumps(record).encode() + b"\n")
        except OSError as exc:
            log.error("could not signal completion of %s: %s", record.get("op_id"), exc)

    def close(self) -> None:
        self._closed = True
        if self._server is not None:
            self._server.close()
        try:
            os.unlink(self.path)
        except OSError:
            pass


class HttpError(Exception):
    def __init__(self, status: int, body: dict):
        super().__init__(body.get("error", ""))
        self.status = status
        self.body = body


def run_operation(bus: CompletionBus, lock: threading.Lock, kind: str,
                  fn: Callable[[], tuple], timeout: float) -> tuple:
    """Run ``fn`` under ``lock`` on a worker; block until its completion record.

    ``fn`` returns ``(status, body)``.  Raises OperationInFlight if the lock is
    taken.  Returns ``(status, body)`` for the HTTP response.
    """
    if not lock.acquire(blocking=False):
        raise OperationInFlight(f"another operation is in flight ({kind} rejected)")
    op_id = uuid.uuid4().hex
    waiter = bus.register(op_id)

    def worker():
        t0 = time.monotonic()
        try:
            status, body = fn()
        except HttpError as exc:
            status, body = exc.status, exc.body
        except Exception as exc:  # noqa: BLE001 - reported to the client
            log.exception("%s operation crashed", kind)
            status, body = 500, {"error": f"{type(exc).__name__}: {exc}"}
        done = time.monotonic()
        duration = done - t0
        lock.release()
        body = dict(body)
        body.setdefault("duration", duration)
        body["completed_at"] = done  # CLOCK_MONOTONIC, comparable across local processes
        bus.signal({"op_id": op_id, "op": kind, "outcome": "ok" if status < 300 else "failed",
                    "duration": duration, "status": status, "body": body})

    threading.Thread(target=worker, name=f"op-{kind}", daemon=True).start()
    rec = waiter.wait(timeout)
    if rec is None:
        bus.forget(op_id)
        return 500, {"error": "completion record not received before correlation timeout",
                     "op_id": op_id}
    body = dict(rec["body"])
    body["op_id"] = op_id
    return rec["status"], body


class ControlServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, daemon):
        self.liquid = daemon
        super().__init__(address, Handler)


class Handler(BaseHTTPRequestHandler):
    server: ControlServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("http %s", fmt % args)

    def _reply(self, status: int, body, content_type="application/json"):
        data = body if isinstance(body, bytes) else (json.dumps(body) + "\n").encode()
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict:
        n = int(self.headers.get("Content-Length") or 0)
        if not n:
            return {}
        try:
            doc = json.loads(self.rfile.read(n))
        except ValueError:
            raise HttpError(422, {"error": "request body is not valid JSON"}) from None
        if not isinstance(doc, dict):
            raise HttpError(422, {"error": "request body must be a JSON object"})
        return doc

    def do_GET(self):
        d = self.server.liquid
        if self.path == "/status":
            self._reply(200, d.status())
        elif self.path == "/metrics":
            self._reply(200, d.metrics_text().encode(), "text/plain; version=0.0.4")
        else:
            self._reply(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        d = self.server.liquid
        routes = {"/run": d.handle_run, "/checkpoint": d.handle_checkpoint, "/inject": d.handle_inject}
        fn = routes.get(self.path)
        if fn is None:
            self._reply(404, {"error": f"no route {self.path}"})
            return
        try:
            status, body = fn(self._body())
        except HttpError as exc:
            status, body = exc.status, exc.body
        except OperationInFlight as exc:
            status, body = 409, {"error": str(exc)}
        self._reply(status, body)
