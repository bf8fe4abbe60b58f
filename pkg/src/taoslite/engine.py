"""The running engine: scheduler + executors + gateway + reporter + metrics + control socket."""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable

from taoslite.config import (
    ConfigError,
    EngineConfig,
    ReloadOutcome,
    apply_reload,
    diff_config,
    load_config,
    merge_for_reload,
)
from taoslite.metrics import MetricsRecorder, Ticker
from taoslite.modulator import Registry, Verdict
from taoslite.pipeline import aggregate, execute_job
from taoslite.reporter import CONTEXTS, Reporter, StatusUpdate
from taoslite.scheduler import Job, JobState, Scheduler, SchedulerStateError
from taoslite.webhook import (
    SIGNATURE_HEADER,
    CommitEvent,
    Gateway,
    JobTicket,
    RawWebhook,
    WebhookServer,
    sign,
)

if TYPE_CHECKING:
    from taoslite.pipeline import JobReport

logger = logging.getLogger(__name__)

CONTROL_ENV = "TAOSLITE_CONTROL"


def control_path(config: EngineConfig) -> Path:
    override = os.environ.get(CONTROL_ENV)
    return Path(override) if override else Path(config.workspace_root) / "control.sock"


class Engine:
    """Wires the components together.

    ``job_runner`` replaces the inspection pipeline for a job (used for
    synthetic load); it receives the job and must return a JobReport.
    """

    def __init__(
        self,
        config: EngineConfig,
        *,
        naive_context: bool = False,
        job_runner: Callable[[Job], JobReport] | None = None,
    ) -> None:
        self._config = config
        self.naive_context = naive_context
        self._job_runner = job_runner
        self.registry = Registry(config.plugins)
        self.reporter = Reporter.from_config(config.reporter)
        self.metrics = MetricsRecorder()
        self.ticker = Ticker(self.metrics, config.sample_interval_sec)
        self.reports: dict[int, JobReport] = {}
        self._pool = ThreadPoolExecutor(max_workers=config.max_run_queue, thread_name_prefix="job")
        self.scheduler = Scheduler(
            config.max_run_queue,
            self._start_job,
            on_replaced=self._job_replaced,
            on_killed=self._job_killed,
            on_finished=self._job_finished,
        )
        self.gateway = Gateway(config.webhook_secret, self.scheduler.submit, self.reporter.job_accepted)
        self.webhook_server: WebhookServer | None = None
        self.control_server: ControlServer | None = None
        self._reload_lock = threading.Lock()
        self._started = False

    @property
    def config(self) -> EngineConfig:
        return self._config

    # -- lifecycle ------------------------------------------------------------------

    def start(self, *, listen: bool = True, control: bool = True) -> Engine:
        self.reporter.start()
        self.ticker.start()
        if listen:
            host, port = self._config.listen
            self.webhook_server = WebhookServer(self.gateway, host, port)
            self.webhook_server.start()
        if control:
            self.control_server = ControlServer(control_path(self._config), self)
            self.control_server.start()
        self._started = True
        return self

    def shutdown(self, grace: float | None = None) -> None:
        """Refuse new work, let running jobs drain for ``grace`` seconds, then kill the rest."""
        grace = self._config.shutdown_grace_sec if grace is None else grace
        if self.webhook_server is not None:
            self.webhook_server.stop()
            self.webhook_server = None
        self.scheduler.shutdown()
        if not self.scheduler.wait_idle(grace):
            for job_summary in self.scheduler.snapshot().running:
                logger.warning("killing job %d at shutdown", job_summary["id"])
                self.scheduler.kill(job_summary["id"])
        self._pool.shutdown(wait=True)
        if self.control_server is not None:
            self.control_server.stop()
            self.control_server = None
        self.ticker.stop()
        self.reporter.flush()
        self.reporter.stop()
        self._started = False

    def __enter__(self) -> Engine:
        return self

    def __exit__(self, *exc: object) -> None:
        self.shutdown(grace=0 if exc[0] is not None else None)

    # -- operations -----------------------------------------------------------------

    def submit(self, event: CommitEvent) -> JobTicket:
        return self.gateway.handle_event(event)

    def replay(self, headers: dict[str, str], body: bytes) -> tuple[int, dict]:
        """Deliver a recorded webhook as if it came from the code host, signed with our secret."""
        headers = {k: v for k, v in headers.items() if k.lower() != SIGNATURE_HEADER.lower()}
        headers[SIGNATURE_HEADER] = "sha256=" + sign(body, self._config.webhook_secret)
        response = self.gateway.deliver(RawWebhook.from_headers(headers, body))
        return int(response.status), response.payload

    def reload(self, path: os.PathLike | str | None = None) -> ReloadOutcome:
        """load -> diff -> apply. The old plan stays active if anything fails."""
        with self._reload_lock:
            path = path or self._config.source_path
            if path is None:
                raise ConfigError("engine was not started from a config file; pass a path")
            new = load_config(path)
            old = self._config
            delta = diff_config(old, new)
            outcome = apply_reload(self.registry, delta, order=[p.name for p in new.plugins])
            if outcome.accepted:
                self._config = merge_for_reload(old, new)
                logger.info("reload applied (plan v%d, %d active): %s", outcome.plan_version,
                            outcome.active_count, delta.describe().replace("\n", "; "))
            else:
                logger.warning("reload rejected: %s", outcome.error)
            return outcome

    # -- executor ---------------------------------------------------------------------

    def _start_job(self, job: Job) -> None:
        self._pool.submit(self._run_job, job)

    def _run_job(self, job: Job) -> None:
        if job.cancel.cancelled:
            return
        plan = self.registry.plan
        config = self._config
        try:
            if self._job_runner is not None:
                report = self._job_runner(job)
            else:
                report = execute_job(
                    job, plan, config,
                    on_result=lambda r: self.metrics.record_plugin_timing(job.id, r.plugin, r.duration_ms),
                    naive=self.naive_context,
                )
        except Exception as exc:  # noqa: BLE001
            logger.exception("job %d crashed", job.id)
            report = aggregate(None, [], None, job_id=job.id, notes=[f"infrastructure error: {exc}"])
            report.infrastructure_error = True
        self.reports[job.id] = report
        if job.cancel.cancelled:
            return
        outcome = JobState.SUCCEEDED if report.final_verdict is Verdict.PASS else JobState.FAILED
        try:
            self.scheduler.complete(job.id, outcome, report)
        except SchedulerStateError:
            pass  # killed after the pipeline finished

    # -- scheduler hooks ----------------------------------------------------------------

    def _job_replaced(self, job: Job) -> None:
        self.reporter.job_replaced(job.id, job.event, job.replaced_by)

    def _job_killed(self, job: Job) -> None:
        for ctx in CONTEXTS:
            self.reporter.enqueue_status(job.id, StatusUpdate(job.event.repo, job.event.head_sha, ctx, "error", "killed"))

    def _job_finished(self, job: Job) -> None:
        self.reporter.job_finished(job.id, job.event, job.outcome)

    # -- control commands -------------------------------------------------------------

    def control(self, request: dict[str, Any]) -> dict[str, Any]:
        cmd = request.get("cmd")
        if cmd == "ping":
            return {"ok": True}
        if cmd == "queue":
            return {"ok": True, "queue": self.scheduler.snapshot().to_dict()}
        if cmd == "plan":
            plan = self.registry.plan
            return {"ok": True, "plan": {"version": plan.version,
                                         "format": [e.name for e in plan.format_order],
                                         "audit": [e.name for e in plan.audit_order]}}
        if cmd == "kill":
            try:
                job_id = int(request["id"])
            except (KeyError, TypeError, ValueError):
                return {"ok": False, "error": "kill needs an integer id"}
            killed = self.scheduler.kill(job_id)
            if not killed:
                return {"ok": False, "error": f"no live job {job_id}"}
            return {"ok": True, "killed": job_id}
        if cmd == "reload":
            try:
                outcome = self.reload(request.get("path"))
            except (ConfigError, OSError) as exc:
                return {"ok": False, "error": str(exc)}
            return {"ok": outcome.accepted, "reload": outcome.to_dict(),
                    "delta_text": outcome.delta.describe(), "error": outcome.error}
        if cmd == "replay":
            headers = request.get("headers")
            body = request.get("body")
            if not isinstance(headers, dict) or not isinstance(body, str):
                return {"ok": False, "error": "replay needs headers (object) and body (string)"}
            status, payload = self.replay({str(k): str(v) for k, v in headers.items()}, body.encode())
            return {"ok": 200 <= status < 300, "status": status, "response": payload}
        if cmd == "metrics":
            self.metrics.sample()
            return {"ok": True, "metrics": self.metrics.to_dict()}
        if cmd == "report":
            try:
                report = self.reports.get(int(request["id"]))
            except (KeyError, TypeError, ValueError):
                return {"ok": False, "error": "report needs an integer id"}
            if report is None:
                return {"ok": False, "error": "no report for that job"}
            return {"ok": True, "report": report.to_dict()}
        return {"ok": False, "error": f"unknown command {cmd!r}"}


class _ControlHandler(socketserver.StreamRequestHandler):
    engine: Engine

    def handle(self) -> None:
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                request = json.loads(line)
                if not isinstance(request, dict):
                    raise ValueError("request must be a JSON object")
                response = self.engine.control(request)
            except ValueError as exc:
                response = {"ok": False, "error": f"bad request: {exc}"}
            except Exception as exc:  # noqa: BLE001
                logger.exception("control command failed")
                response = {"ok": False, "error": f"internal error: {exc}"}
            self.wfile.write((json.dumps(response) + "\n").encode())
            self.wfile.flush()


class ControlServer:
    """Line-delimited JSON over a unix socket, handled on a single thread."""

    def __init__(self, path: Path, engine: Engine) -> None:
        self.path = Path(path)
        if self.path.exists():
            self.path.unlink()
        handler = type("BoundControlHandler", (_ControlHandler,), {"engine": engine})
        self.server = socketserver.UnixStreamServer(str(self.path), handler)
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self.server.serve_forever, name="control", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def control_request(path: os.PathLike | str, request: dict, timeout: float = 30.0) -> dict:
    """Send one command to a running engine. Raises OSError if nothing is listening."""
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        sock.connect(str(path))
        sock.sendall((json.dumps(request) + "\n").encode())
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    if not buf:
        raise ConnectionError("engine closed the control connection")
    return json.loads(buf)
