"""Webhook gateway: signature gate, payload normalization and job submission."""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import TYPE_CHECKING, Any, Callable

if TYPE_CHECKING:
    from collections.abc import Mapping

logger = logging.getLogger(__name__)

EVENT_HEADER = "X-Event-Kind"
SIGNATURE_HEADER = "X-Signature-256"
COMMIT_ACTIONS = frozenset({"opened", "synchronize", "reopened"})
_SHA_RE = re.compile(r"^[0-9a-f]{40}$")


class WebhookParseError(ValueError):
    """Payload is missing a field or carries one of the wrong shape."""

    def __init__(self, path: str, reason: str = "missing") -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class DeliveryRefused(RuntimeError):
    """The scheduler is not accepting work (shutdown in progress)."""


@dataclass(frozen=True, slots=True)
class RawWebhook:
    event_kind: str
    signature: str
    body: bytes

    @classmethod
    def from_headers(cls, headers: Mapping[str, str], body: bytes) -> RawWebhook:
        lowered = {k.lower(): v for k, v in headers.items()}
        return cls(
            event_kind=lowered.get(EVENT_HEADER.lower(), ""),
            signature=lowered.get(SIGNATURE_HEADER.lower(), ""),
            body=body,
        )


@dataclass(frozen=True, slots=True)
class CommitEvent:
    repo: str
    change_id: int
    source_ref: str
    target_ref: str
    head_sha: str
    author: str
    received_at: float = field(default_factory=time.monotonic, compare=False)

    def __post_init__(self) -> None:
        if self.change_id < 1:
            raise ValueError("change_id must be >= 1")
        if not _SHA_RE.match(self.head_sha):
            raise ValueError(f"head_sha is not a 40-char lowercase hex digest: {self.head_sha!r}")

    @property
    def key(self) -> tuple[str, int]:
        """Duplicate key used by the scheduler."""
        return (self.repo, self.change_id)


@dataclass(frozen=True, slots=True)
class Ignored:
    reason: str


@dataclass(frozen=True, slots=True)
class JobTicket:
    job_id: int


def sign(body: bytes, secret: bytes) -> str:
    return hmac.new(secret, body, hashlib.sha256).hexdigest()


def verify_signature(body: bytes, signature: str, secret: bytes) -> bool:
    """Constant-time HMAC-SHA256 check. Never raises on malformed input."""
    if not isinstance(signature, str):
        return False
    if signature.startswith("sha256="):
        signature = signature[len("sha256="):]
    try:
        provided = bytes.fromhex(signature)
    except ValueError:
        return False
    expected = hmac.new(secret, body, hashlib.sha256).digest()
    return hmac.compare_digest(provided, expected)


def _lookup(payload: Any, path: str, kind: type) -> Any:
    node = payload
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise WebhookParseError(path)
        node = node[part]
    # bool is an int subclass; reject it for numeric fields
    if not isinstance(node, kind) or (kind is int and isinstance(node, bool)):
        raise WebhookParseError(path, f"expected {kind.__name__}")
    return node


def parse_event(raw: RawWebhook) -> CommitEvent | Ignored:
    """Normalize a verified delivery into a CommitEvent, or Ignored for other kinds."""
    if raw.event_kind != "pull_request":
        return Ignored(f"event kind {raw.event_kind or '<none>'!r} not handled")
    try:
        payload = json.loads(raw.body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WebhookParseError("<body>", f"not valid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise WebhookParseError("<body>", "expected a JSON object")
    action = _lookup(payload, "action", str)
    if action not in COMMIT_ACTIONS:
        return Ignored(f"pull_request action {action!r} not handled")

    number = _lookup(payload, "number", int)
    if number < 1:
        raise WebhookParseError("number", "must be >= 1")
    head_sha = _lookup(payload, "pull_request.head.sha", str)
    if not _SHA_RE.match(head_sha):
        raise WebhookParseError("pull_request.head.sha", "expected 40 lowercase hex characters")
    return CommitEvent(
        repo=_lookup(payload, "repository.full_name", str),
        change_id=number,
        source_ref=_lookup(payload, "pull_request.head.ref", str),
        target_ref=_lookup(payload, "pull_request.base.ref", str),
        head_sha=head_sha,
        author=_lookup(payload, "pull_request.user.login", str),
    )


@dataclass(frozen=True, slots=True)
class DeliveryResponse:
    status: int
    payload: dict


class Gateway:
    """Turns deliveries into scheduler submissions.

    ``submit`` is the scheduler's submit callable; ``on_accepted`` is invoked
    with (job_id, event) so the reporter can queue the initial pending statuses.
    """

    def __init__(
        self,
        secret: bytes,
        submit: Callable[[CommitEvent], int],
        on_accepted: Callable[[int, CommitEvent], None] | None = None,
    ) -> None:
        self.secret = secret
        self._submit = submit
        self._on_accepted = on_accepted

    def handle_event(self, event: CommitEvent) -> JobTicket:
        try:
            job_id = self._submit(event)
        except DeliveryRefused:
            raise
        except RuntimeError as exc:
            raise DeliveryRefused(str(exc)) from exc
        if self._on_accepted is not None:
            self._on_accepted(job_id, event)
        return JobTicket(job_id)

    def deliver(self, raw: RawWebhook) -> DeliveryResponse:
        if not raw.body or not verify_signature(raw.body, raw.signature, self.secret):
            return DeliveryResponse(HTTPStatus.UNAUTHORIZED, {"error": "bad signature"})
        try:
            parsed = parse_event(raw)
        except WebhookParseError as exc:
            return DeliveryResponse(HTTPStatus.BAD_REQUEST, {"error": str(exc), "path": exc.path})
        if isinstance(parsed, Ignored):
            return DeliveryResponse(HTTPStatus.ACCEPTED, {"ignored": parsed.reason})
        try:
            ticket = self.handle_event(parsed)
        except DeliveryRefused as exc:
            return DeliveryResponse(HTTPStatus.SERVICE_UNAVAILABLE, {"error": f"retry later: {exc}"})
        logger.info("accepted %s#%d @%s as job %d", parsed.repo, parsed.change_id,
                    parsed.head_sha[:10], ticket.job_id)
        return DeliveryResponse(HTTPStatus.ACCEPTED, {"job_id": ticket.job_id})


class _WebhookHandler(BaseHTTPRequestHandler):
    gateway: Gateway

    def do_POST(self) -> None:  # noqa: N802
        if self.path.rstrip("/") != "/webhook":
            self._reply(HTTPStatus.NOT_FOUND, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length > 0 else b""
        raw = RawWebhook.from_headers(dict(self.headers.items()), body)
        response = self.gateway.deliver(raw)
        self._reply(response.status, response.payload)

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        logger.debug("webhook %s", format % args)


class WebhookServer:
    """``POST /webhook`` endpoint served from one background thread."""

    def __init__(self, gateway: Gateway, host: str, port: int) -> None:
        handler = type("BoundWebhookHandler", (_WebhookHandler,), {"gateway": gateway})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.httpd.server_address[:2]
        return str(host), int(port)

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="webhook", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
