"""Commit scheduler: FIFO wait queue, bounded run queue and the victim maker."""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

from taoslite.process import CancelToken
from taoslite.webhook import CommitEvent, DeliveryRefused

if TYPE_CHECKING:
    from collections.abc import Iterable

logger = logging.getLogger(__name__)


class JobState(str, enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    KILLED = "killed"
    REPLACED = "replaced"

    @property
    def terminal(self) -> bool:
        return self not in (JobState.WAITING, JobState.RUNNING)


_TRANSITIONS = {
    JobState.WAITING: {JobState.RUNNING, JobState.REPLACED},
    JobState.RUNNING: {JobState.SUCCEEDED, JobState.FAILED, JobState.KILLED},
}


class SchedulerStateError(RuntimeError):
    """Illegal lifecycle transition (unknown job or wrong state)."""


@dataclass(eq=False)
class Job:
    id: int
    event: CommitEvent
    priority: int
    state: JobState = JobState.WAITING
    enqueued_at: float = field(default_factory=time.monotonic)
    started_at: float | None = None
    finished_at: float | None = None
    start_seq: int | None = None
    outcome: Any = None
    replaced_by: int | None = None
    cancel: CancelToken = field(default_factory=CancelToken, repr=False)

    def _move(self, new: JobState) -> None:
        if new not in _TRANSITIONS.get(self.state, ()):
            raise SchedulerStateError(f"job {self.id}: {self.state.value} -> {new.value} not allowed")
        self.state = new

    def summary(self) -> dict:
        return {
            "id": self.id,
            "repo": self.event.repo,
            "change_id": self.event.change_id,
            "head_sha": self.event.head_sha,
            "state": self.state.value,
            "priority": self.priority,
        }


@dataclass(frozen=True, slots=True)
class QueueSnapshot:
    waiting: tuple[dict, ...]
    running: tuple[dict, ...]
    max_run_queue: int

    def to_dict(self) -> dict:
        return {"waiting": list(self.waiting), "running": list(self.running),
                "max_run_queue": self.max_run_queue}


class Scheduler:
    """Owns all queue state behind a single lock.

    ``start_job`` is called (outside the lock) for every job moved to Running;
    it must hand the job to an executor without blocking. The executor reports
    back through :meth:`complete`. Optional hooks observe replacements, kills
    and completions, again outside the lock.
    """

    def __init__(
        self,
        max_run_queue: int,
        start_job: Callable[[Job], None],
        *,
        on_replaced: Callable[[Job], None] | None = None,
        on_killed: Callable[[Job], None] | None = None,
        on_finished: Callable[[Job], None] | None = None,
    ) -> None:
        if max_run_queue < 1:
            raise ValueError("max_run_queue must be >= 1")
        self.max_run_queue = max_run_queue
        self._start_job = start_job
        self._on_replaced = on_replaced
        self._on_killed = on_killed
        self._on_finished = on_finished
        self._lock = threading.RLock()
        self._ids = itertools.count(1)
        self._start_seq = itertools.count(1)
        self._waiting: deque[Job] = deque()
        self._running: dict[int, Job] = {}
        self.jobs: dict[int, Job] = {}
        self.accepting = True
        self.dispatched_total = 0
        self.terminal_from_running = 0
        self._idle = threading.Condition(self._lock)

    # -- public operations ---------------------------------------------------

    def submit(self, event: CommitEvent) -> int:
        with self._lock:
            if not self.accepting:
                raise DeliveryRefused("scheduler is shutting down")
            job_id = next(self._ids)
            replaced = [j for j in self._waiting if j.event.key == event.key]
            for old in replaced:
                old._move(JobState.REPLACED)
                old.finished_at = time.monotonic()
                old.replaced_by = job_id
                self._waiting.remove(old)
            killed = self._sweep_locked(event)
            job = Job(id=job_id, event=event, priority=-job_id)
            self.jobs[job_id] = job
            self._waiting.append(job)
            started = self._dispatch_locked()
        self._notify(self._on_replaced, replaced)
        self._notify(self._on_killed, killed)
        self._launch(started)
        return job_id

    def dispatch(self) -> list[int]:
        with self._lock:
            started = self._dispatch_locked()
        self._launch(started)
        return [j.id for j in started]

    def victim_sweep(self, event: CommitEvent) -> list[int]:
        with self._lock:
            killed = self._sweep_locked(event)
            started = self._dispatch_locked()
        self._notify(self._on_killed, killed)
        self._launch(started)
        return [j.id for j in killed]

    def complete(self, job_id: int, outcome: JobState, report: Any = None) -> None:
        if outcome not in (JobState.SUCCEEDED, JobState.FAILED):
            raise ValueError("outcome must be SUCCEEDED or FAILED")
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None or job.state is not JobState.RUNNING:
                state = "unknown" if job is None else job.state.value
                logger.warning("complete(%s) ignored: job is %s", job_id, state)
                raise SchedulerStateError(f"job {job_id} is {state}, not running")
            job._move(outcome)
            job.finished_at = time.monotonic()
            job.outcome = report
            self._free_slot_locked(job)
            started = self._dispatch_locked()
        self._notify(self._on_finished, [job])
        self._launch(started)

    def kill(self, job_id: int) -> bool:
        killed: list[Job] = []
        replaced: list[Job] = []
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None or job.state.terminal:
                return False
            if job.state is JobState.WAITING:
                job._move(JobState.REPLACED)
                job.finished_at = time.monotonic()
                self._waiting.remove(job)
                replaced.append(job)
                self._idle.notify_all()
            else:
                self._kill_locked(job)
                killed.append(job)
            started = self._dispatch_locked()
        self._notify(self._on_replaced, replaced)
        self._notify(self._on_killed, killed)
        self._launch(started)
        return True

    def snapshot(self) -> QueueSnapshot:
        with self._lock:
            return QueueSnapshot(
                waiting=tuple(j.summary() for j in self._waiting),
                running=tuple(j.summary() for j in sorted(self._running.values(), key=lambda j: j.start_seq or 0)),
                max_run_queue=self.max_run_queue,
            )

    def shutdown(self) -> list[Job]:
        """Stop accepting and drop the wait queue; returns the jobs still running."""
        with self._lock:
            self.accepting = False
            while self._waiting:
                job = self._waiting.popleft()
                job._move(JobState.REPLACED)
                job.finished_at = time.monotonic()
                logger.info("dropping waiting job %d at shutdown", job.id)
            self._idle.notify_all()
            return list(self._running.values())

    def wait_idle(self, timeout: float | None = None) -> bool:
        """Block until nothing is waiting or running."""
        with self._idle:
            return self._idle.wait_for(lambda: not self._waiting and not self._running, timeout)

    @property
    def running_count(self) -> int:
        with self._lock:
            return len(self._running)

    # -- internals -------------------------------------------------------------

    def _dispatch_locked(self) -> list[Job]:
        started: list[Job] = []
        while self._waiting and len(self._running) < self.max_run_queue:
            job = self._waiting.popleft()
            job._move(JobState.RUNNING)
            job.started_at = time.monotonic()
            job.start_seq = next(self._start_seq)
            self._running[job.id] = job
            self.dispatched_total += 1
            started.append(job)
        assert len(self._running) <= self.max_run_queue
        return started

    def _sweep_locked(self, event: CommitEvent) -> list[Job]:
        victims = sorted(
            (j for j in self._running.values() if j.event.key == event.key),
            key=lambda j: (j.started_at or 0.0, j.start_seq or 0),
        )
        for job in victims:
            self._kill_locked(job)
        return victims

    def _kill_locked(self, job: Job) -> None:
        job._move(JobState.KILLED)
        job.finished_at = time.monotonic()
        self._free_slot_locked(job)
        job.cancel.cancel()

    def _free_slot_locked(self, job: Job) -> None:
        del self._running[job.id]
        self.terminal_from_running += 1
        self._idle.notify_all()

    def _launch(self, jobs: Iterable[Job]) -> None:
        for job in jobs:
            try:
                self._start_job(job)
            except Exception:  # noqa: BLE001
                logger.exception("executor for job %d failed to start", job.id)
                try:
                    self.complete(job.id, JobState.FAILED, None)
                except SchedulerStateError:
                    pass

    @staticmethod
    def _notify(hook: Callable[[Job], None] | None, jobs: Iterable[Job]) -> None:
        if hook is None:
            return
        for job in jobs:
            try:
                hook(job)
            except Exception:  # noqa: BLE001
                logger.exception("scheduler hook failed for job %d", job.id)
