"""Child-process execution with timeouts, cancellation and process-group teardown."""

from __future__ import annotations

import os
import select
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

TERMINATION_GRACE_SEC = 5.0
_POLL_SEC = 0.05


class CancelToken:
    """Cooperative kill switch shared between a job executor and the scheduler.

    Cancelling signals every attached child process group immediately; the
    waiting side escalates to SIGKILL once the grace period lapses.
    """

    def __init__(self) -> None:
        self._event = threading.Event()
        self._lock = threading.Lock()
        self._procs: set[subprocess.Popen] = set()

    @property
    def cancelled(self) -> bool:
        return self._event.is_set()

    def cancel(self) -> None:
        with self._lock:
            self._event.set()
            procs = list(self._procs)
        for proc in procs:
            _signal_group(proc, signal.SIGTERM)

    def wait(self, timeout: float | None = None) -> bool:
        return self._event.wait(timeout)

    def attach(self, proc: subprocess.Popen) -> None:
        with self._lock:
            self._procs.add(proc)
            cancelled = self._event.is_set()
        if cancelled:
            _signal_group(proc, signal.SIGTERM)

    def detach(self, proc: subprocess.Popen) -> None:
        with self._lock:
            self._procs.discard(proc)


@dataclass(frozen=True, slots=True)
class ProcessOutcome:
    exit_code: int | None
    duration_ms: int
    timed_out: bool = False
    cancelled: bool = False
    spawn_error: str | None = None


def _signal_group(proc: subprocess.Popen, sig: int) -> None:
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def terminate_tree(proc: subprocess.Popen, grace: float = TERMINATION_GRACE_SEC) -> None:
    """SIGTERM the child's process group, then SIGKILL whatever survives ``grace``."""
    _signal_group(proc, signal.SIGTERM)
    try:
        proc.wait(timeout=grace)
    except subprocess.TimeoutExpired:
        pass
    _signal_group(proc, signal.SIGKILL)
    try:
        proc.wait(timeout=grace)
    except subprocess.TimeoutExpired:
        pass


def _exit_waiter(proc: subprocess.Popen):
    """Return ``wait(timeout) -> bool`` that wakes as soon as ``proc`` exits.

    Uses a pidfd where the kernel offers one; Popen.wait(timeout) otherwise,
    whose backoff sleeps delay exit detection by a few milliseconds.
    """
    try:
        fd = os.pidfd_open(proc.pid)
    except (AttributeError, OSError):
        fd = None

    def wait(timeout: float) -> bool:
        if fd is not None:
            select.select([fd], [], [], timeout)
            return proc.poll() is not None
        try:
            proc.wait(timeout=timeout)
            return True
        except subprocess.TimeoutExpired:
            return False

    def close() -> None:
        if fd is not None:
            os.close(fd)

    return wait, close


def run_process(
    argv: Sequence[str],
    *,
    cwd: Path,
    env: Mapping[str, str],
    timeout: float,
    log_path: Path,
    cancel: CancelToken | None = None,
    grace: float = TERMINATION_GRACE_SEC,
) -> ProcessOutcome:
    """Run ``argv`` in its own session, appending stdout and stderr to ``log_path``."""
    start = time.monotonic()
    with open(log_path, "ab") as log:
        try:
            proc = subprocess.Popen(
                list(argv),
                cwd=cwd,
                env=dict(env),
                stdin=subprocess.DEVNULL,
                stdout=log,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except OSError as exc:
            return ProcessOutcome(
                exit_code=None,
                duration_ms=int((time.monotonic() - start) * 1000),
                spawn_error=f"{type(exc).__name__}: {exc}",
            )
        if cancel is not None:
            cancel.attach(proc)
        timed_out = cancelled = False
        wait, close = _exit_waiter(proc)
        try:
            deadline = start + timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    timed_out = True
                    terminate_tree(proc, grace)
                    break
                if wait(min(remaining, _POLL_SEC)):
                    break
                if cancel is not None and cancel.cancelled:
                    terminate_tree(proc, grace)
                    break
            # the token's SIGTERM may have ended the child before the loop saw the flag
            cancelled = cancel is not None and cancel.cancelled and not timed_out
        finally:
            close()
            if cancel is not None:
                cancel.detach(proc)
            # stragglers left behind in the group by a finished leader
            _signal_group(proc, signal.SIGKILL)
    return ProcessOutcome(
        exit_code=proc.returncode,
        duration_ms=int((time.monotonic() - start) * 1000),
        timed_out=timed_out,
        cancelled=cancelled,
    )
