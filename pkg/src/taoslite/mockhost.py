"""In-process stand-in for the code host's status and comment API.

Records every call in memory and can be told to fail the next N requests,
which is how tests exercise the reporter's retry path.
"""

from __future__ import annotations

import json
import re
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import unquote

_STATUS_RE = re.compile(r"^/repos/(?P<repo>.+)/statuses/(?P<sha>[0-9a-f]{40})$")
_COMMENT_RE = re.compile(r"^/repos/(?P<repo>.+)/issues/(?P<number>\d+)/comments$")


class _Handler(BaseHTTPRequestHandler):
    host: MockCodeHost

    def do_POST(self) -> None:  # noqa: N802
        self.host._handle(self)

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass


class MockCodeHost:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, token: str | None = None) -> None:
        handler = type("BoundMockHandler", (_Handler,), {"host": self})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self.token = token
        self.transcript: list[dict] = []
        self.attempts = 0
        self._fail_remaining = 0
        self._fail_status = HTTPStatus.SERVICE_UNAVAILABLE
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> MockCodeHost:
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="mock-code-host", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def fail_next(self, n: int, status: int = HTTPStatus.SERVICE_UNAVAILABLE) -> None:
        with self._lock:
            self._fail_remaining = n
            self._fail_status = status

    def statuses(self, sha: str | None = None) -> list[dict]:
        with self._lock:
            return [e for e in self.transcript if e["kind"] == "status" and (sha is None or e["sha"] == sha)]

    def comments(self) -> list[dict]:
        with self._lock:
            return [e for e in self.transcript if e["kind"] == "comment"]

    def wait_for(self, predicate: Callable[[MockCodeHost], bool], timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while not predicate(self):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False
            with self._changed:
                self._changed.wait(min(remaining, 0.1))
        return True

    def _handle(self, req: BaseHTTPRequestHandler) -> None:
        length = int(req.headers.get("Content-Length") or 0)
        body = req.rfile.read(length) if length else b""
        with self._lock:
            self.attempts += 1
            failing = self._fail_remaining > 0
            if failing:
                self._fail_remaining -= 1
        if failing:
            self._reply(req, self._fail_status, {"error": "injected failure"})
            return
        if self.token is not None and req.headers.get("Authorization") != f"token {self.token}":
            self._reply(req, HTTPStatus.UNAUTHORIZED, {"error": "bad credentials"})
            return
        try:
            payload = json.loads(body or b"{}")
        except json.JSONDecodeError:
            self._reply(req, HTTPStatus.BAD_REQUEST, {"error": "invalid json"})
            return
        path = unquote(req.path)
        if m := _STATUS_RE.match(path):
            entry = {"kind": "status", "repo": m["repo"], "sha": m["sha"],
                     "context": payload.get("context"), "state": payload.get("state"),
                     "description": payload.get("description", "")}
        elif m := _COMMENT_RE.match(path):
            entry = {"kind": "comment", "repo": m["repo"], "number": int(m["number"]),
                     "body": payload.get("body", "")}
        else:
            self._reply(req, HTTPStatus.NOT_FOUND, {"error": "not found"})
            return
        with self._changed:
            self.transcript.append(entry)
            self._changed.notify_all()
        self._reply(req, HTTPStatus.CREATED, {"id": len(self.transcript)})

    @staticmethod
    def _reply(req: BaseHTTPRequestHandler, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode()
        req.send_response(status)
        req.send_header("Content-Type", "application/json")
        req.send_header("Content-Length", str(len(data)))
        req.end_headers()
        req.wfile.write(data)
