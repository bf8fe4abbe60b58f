"""Commit statuses and report comments posted back to the code host."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

from taoslite.modulator import Group, Verdict

if TYPE_CHECKING:
    from taoslite.config import ReporterConfig
    from taoslite.pipeline import JobReport, PhaseReport
    from taoslite.webhook import CommitEvent

logger = logging.getLogger(__name__)

CONTEXTS = ("taos/format", "taos/build", "taos/audit", "taos/total")
STATES = frozenset({"pending", "success", "failure", "error"})
MAX_DESCRIPTION = 140
MESSAGES_PER_PLUGIN = 20
REQUEST_TIMEOUT_SEC = 10


@dataclass(frozen=True, slots=True)
class StatusUpdate:
    repo: str
    head_sha: str
    context: str
    state: str
    description: str = ""

    def __post_init__(self) -> None:
        if self.context not in CONTEXTS:
            raise ValueError(f"unknown status context {self.context!r}")
        if self.state not in STATES:
            raise ValueError(f"unknown status state {self.state!r}")
        if len(self.description) > MAX_DESCRIPTION:
            object.__setattr__(self, "description", self.description[: MAX_DESCRIPTION - 1] + "…")

    def to_json(self) -> dict:
        return {"context": self.context, "state": self.state, "description": self.description}


@dataclass(frozen=True, slots=True)
class DeliveryResult:
    delivered: bool
    attempts: int
    status: int | None = None
    error: str | None = None
    undeliverable: bool = False


class CodeHostClient:
    """Minimal status/comment API client with retry on transport failures."""

    def __init__(
        self,
        base_url: str,
        token: str = "",
        *,
        retries: int = 3,
        backoff_sec: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.retries = retries
        self.backoff_sec = backoff_sec
        self._sleep = sleep

    def post_status(self, update: StatusUpdate) -> DeliveryResult:
        path = f"/repos/{update.repo}/statuses/{update.head_sha}"
        return self._post(path, update.to_json())

    def post_comment(self, repo: str, change_id: int, body: str) -> DeliveryResult:
        return self._post(f"/repos/{repo}/issues/{change_id}/comments", {"body": body})

    def _post(self, path: str, payload: dict) -> DeliveryResult:
        data = json.dumps(payload).encode()
        headers = {"Content-Type": "application/json", "Accept": "application/json"}
        if self.token:
            headers["Authorization"] = f"token {self.token}"
        url = self.base_url + urllib.parse.quote(path)
        attempts = 0
        last_error = None
        for delay in [*(self.backoff_sec * 2 ** i for i in range(self.retries)), None]:
            attempts += 1
            request = urllib.request.Request(url, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(request, timeout=REQUEST_TIMEOUT_SEC) as resp:
                    return DeliveryResult(True, attempts, resp.status)
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    # auth rejections and other client errors are not worth retrying
                    logger.error("code host rejected %s: HTTP %d", path, exc.code)
                    return DeliveryResult(False, attempts, exc.code, f"HTTP {exc.code}", undeliverable=True)
                last_error = f"HTTP {exc.code}"
            except (urllib.error.URLError, OSError) as exc:
                last_error = str(getattr(exc, "reason", exc))
            if delay is not None:
                logger.info("delivery to %s failed (%s), retrying in %.1fs", path, last_error, delay)
                self._sleep(delay)
        logger.error("giving up on %s after %d attempts: %s", path, attempts, last_error)
        return DeliveryResult(False, attempts, None, last_error)


def pending_statuses(event: CommitEvent) -> list[StatusUpdate]:
    return [StatusUpdate(event.repo, event.head_sha, ctx, "pending", "queued") for ctx in CONTEXTS]


def _phase_status(phase: PhaseReport) -> tuple[str, str]:
    counts = {v: sum(1 for r in phase.results if r.verdict is v) for v in Verdict}
    summary = f"{counts[Verdict.PASS]} passed, {sum(counts[v] for v in Verdict if v.is_failure)} failed"
    if counts[Verdict.SKIPPED]:
        summary += f", {counts[Verdict.SKIPPED]} skipped"
    return ("success" if phase.passed else "failure"), summary


def statuses_for_report(report: JobReport, event: CommitEvent) -> list[StatusUpdate]:
    """The four terminal statuses mirroring a finished job's report."""

    def status(ctx: str, state: str, description: str) -> StatusUpdate:
        return StatusUpdate(event.repo, event.head_sha, ctx, state, description)

    if report.killed:
        return [status(ctx, "error", "killed") for ctx in CONTEXTS]

    out = []
    if report.format is None:
        reason = report.notes[-1] if report.notes else "aborted before checks"
        out.append(status("taos/format", "error", reason))
        out.append(status("taos/build", "error", "skipped: " + reason))
        out.append(status("taos/audit", "error", "skipped: " + reason))
    else:
        out.append(status("taos/format", *_phase_status(report.format)))
        if not report.format.passed:
            out.append(status("taos/build", "error", "skipped: format failed"))
            out.append(status("taos/audit", "error", "skipped: format failed"))
        elif report.infrastructure_error:
            reason = report.notes[-1] if report.notes else "infrastructure error"
            out.append(status("taos/build", "error", reason))
            out.append(status("taos/audit", "error", "skipped: " + reason))
        elif not report.builds:
            out.append(status("taos/build", "success", "no packaging scripts"))
            out.append(status("taos/audit", "success", "skipped: nothing built"))
        else:
            failed = [b.profile for b in report.builds if not b.success]
            if failed:
                out.append(status("taos/build", "failure", "failed: " + ", ".join(failed)))
                out.append(status("taos/audit", "error", "skipped: build failed"))
            else:
                out.append(status("taos/build", "success", f"{len(report.builds)} profile(s) built"))
                if report.audit is not None:
                    out.append(status("taos/audit", *_phase_status(report.audit)))
                else:
                    out.append(status("taos/audit", "error", "audit did not run"))
    out.append(status("taos/total", "success" if report.passed else "failure",
                      "PASS" if report.passed else "FAIL"))
    return out


def _render_phase(phase: PhaseReport) -> list[str]:
    lines = [f"```{phase.phase.value}", f"verdict: {phase.verdict.value.upper()}"]
    if not phase.results:
        lines.append("(no plugins)")
    for group in Group:
        results = [r for r in phase.results if r.group is group]
        if not results:
            continue
        lines.append(f"[{group.value}]")
        for r in results:
            exit_part = f"exit {r.exit_code}" if r.exit_code is not None else "no exit code"
            lines.append(f"  {r.plugin}: {r.verdict.value.upper()} ({exit_part}, {r.duration_ms} ms)")
            for m in r.messages[:MESSAGES_PER_PLUGIN]:
                where = ""
                if m.file:
                    where = f"{m.file}:{m.line}: " if m.line is not None else f"{m.file}: "
                lines.append(f"    {m.severity}: {where}{m.text}")
            extra = len(r.messages) - MESSAGES_PER_PLUGIN
            if extra > 0:
                lines.append(f"    … and {extra} more")
    lines.append("```")
    return lines


def render_report(report: JobReport, event: CommitEvent) -> str:
    lines = [
        f"taoslite report for job {report.job_id}: {event.repo}#{event.change_id} @ {event.head_sha[:12]}",
        f"TOTAL: {'PASS' if report.passed else 'FAIL'}",
        "",
    ]
    if report.format is not None:
        lines += _render_phase(report.format)
    lines.append("```build")
    if not report.builds:
        lines.append("(no builds)")
    for b in report.builds:
        state = "OK" if b.success else "FAILED"
        lines.append(f"  {b.profile}: {state} (exit {b.exit_code}, {b.duration_ms} ms)")
        for art in b.artifacts:
            lines.append(f"    artifact: {art}")
    lines.append("```")
    if report.audit is not None:
        lines += _render_phase(report.audit)
    if report.notes:
        lines.append("notes:")
        lines += [f"- {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


_STOP = object()


class Reporter:
    """Serialized outbound delivery: one worker thread, one call in flight."""

    def __init__(self, client: CodeHostClient | None) -> None:
        self.client = client
        self.results: list[tuple[str, DeliveryResult]] = []
        self._queue: queue.Queue = queue.Queue()
        self._terminal: set[tuple[int, str]] = set()
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @classmethod
    def from_config(cls, config: ReporterConfig) -> Reporter:
        if not config.url:
            return cls(None)
        return cls(CodeHostClient(config.url, config.token, retries=config.retries,
                                  backoff_sec=config.backoff_sec))

    def start(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(target=self._worker, name="reporter", daemon=True)
            self._thread.start()

    def stop(self, timeout: float = 10.0) -> None:
        if self._thread is not None:
            self._queue.put(_STOP)
            self._thread.join(timeout)
            self._thread = None

    def flush(self, timeout: float = 30.0) -> bool:
        """Wait until everything queued so far has been attempted."""
        done = threading.Event()
        self._queue.put(done.set)
        if self._thread is None:
            self._drain()
        return done.wait(timeout)

    # -- job lifecycle hooks ----------------------------------------------------

    def job_accepted(self, job_id: int, event: CommitEvent) -> None:
        for update in pending_statuses(event):
            self._queue.put(("status", job_id, update))

    def job_finished(self, job_id: int, event: CommitEvent, report: JobReport) -> None:
        for update in statuses_for_report(report, event):
            self.enqueue_status(job_id, update)
        self._queue.put(("comment", job_id, (event.repo, event.change_id, render_report(report, event))))

    def job_replaced(self, job_id: int, event: CommitEvent, replaced_by: int | None) -> None:
        note = f"taoslite: job {job_id} for {event.head_sha[:12]} superseded"
        if replaced_by is not None:
            note += f" by job {replaced_by}"
        self._queue.put(("comment", job_id, (event.repo, event.change_id, note + "\n")))

    def enqueue_status(self, job_id: int, update: StatusUpdate) -> None:
        if update.state != "pending":
            key = (job_id, update.context)
            with self._lock:
                if key in self._terminal:
                    logger.debug("suppressing duplicate terminal status %s for job %d", update.context, job_id)
                    return
                self._terminal.add(key)
        self._queue.put(("status", job_id, update))

    # -- direct calls -------------------------------------------------------------

    def post_status(self, update: StatusUpdate) -> DeliveryResult:
        if self.client is None:
            result = DeliveryResult(True, 0)
        else:
            result = self.client.post_status(update)
        self.results.append((f"status {update.context}={update.state}", result))
        return result

    def post_report(self, report: JobReport, event: CommitEvent) -> DeliveryResult:
        return self._post_comment(event.repo, event.change_id, render_report(report, event))

    def _post_comment(self, repo: str, change_id: int, body: str) -> DeliveryResult:
        if self.client is None:
            result = DeliveryResult(True, 0)
        else:
            result = self.client.post_comment(repo, change_id, body)
        self.results.append((f"comment {repo}#{change_id}", result))
        return result

    # -- worker -----------------------------------------------------------------

    def _handle(self, item) -> bool:
        if item is _STOP:
            return False
        if callable(item):
            item()
            return True
        kind, _job_id, payload = item
        try:
            if kind == "status":
                self.post_status(payload)
            else:
                self._post_comment(*payload)
        except Exception:  # noqa: BLE001
            logger.exception("reporter delivery failed")
        return True

    def _worker(self) -> None:
        while True:
            item = self._queue.get()
            if not self._handle(item):
                return

    def _drain(self) -> None:
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return
            self._handle(item)
