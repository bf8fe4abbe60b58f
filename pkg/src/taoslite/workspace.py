"""Per-job workspaces under a designated root folder, plus source and dependency preparation."""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from taoslite.process import CancelToken, run_process
from taoslite.scheduler import JobState

if TYPE_CHECKING:
    from taoslite.builder import PlatformProfile
    from taoslite.webhook import CommitEvent

logger = logging.getLogger(__name__)

GIT_TIMEOUT_SEC = 600
_GIT_IDENTITY = ("-c", "user.name=taoslite", "-c", "user.email=taoslite@localhost",
                 "-c", "commit.gpgsign=false", "-c", "advice.detachedHead=false")


class InfrastructureError(RuntimeError):
    """Engine-side failure (disk, fetch, dependency setup), as opposed to a check verdict."""

    def __init__(self, message: str, *, exit_code: int | None = None, log_path: Path | None = None) -> None:
        super().__init__(message)
        self.exit_code = exit_code
        self.log_path = log_path


class MergeConflict(RuntimeError):
    """The change does not merge cleanly onto its target branch."""

    def __init__(self, files: list[str]) -> None:
        super().__init__("merge-conflict: " + ", ".join(files) if files else "merge-conflict")
        self.files = files


@dataclass(frozen=True, slots=True)
class WorkspaceHandle:
    root: Path
    job_dir: Path
    source_dir: Path
    artifact_dir: Path
    log_dir: Path

    @classmethod
    def for_job(cls, root: Path, job_id: int) -> WorkspaceHandle:
        root = Path(root).resolve()
        job_dir = root / str(int(job_id))
        return cls(root, job_dir, job_dir / "src", job_dir / "out", job_dir / "log")

    def contains(self, path: os.PathLike | str) -> bool:
        return is_within(self.job_dir, path)


@dataclass(frozen=True, slots=True)
class MergedTree:
    changed_files: tuple[str, ...]
    base_sha: str
    merge_sha: str


def is_within(parent: os.PathLike | str, path: os.PathLike | str) -> bool:
    parent = Path(parent).resolve()
    try:
        Path(path).resolve().relative_to(parent)
    except ValueError:
        return False
    return True


def allocate(root: os.PathLike | str, job_id: int) -> WorkspaceHandle:
    """Create ``root/<job_id>/{src,out,log}``, discarding any crash leftover."""
    handle = WorkspaceHandle.for_job(Path(root), job_id)
    if not handle.contains(handle.source_dir) or handle.job_dir.parent != handle.root:
        raise InfrastructureError(f"workspace for job {job_id} escapes {handle.root}")
    try:
        if handle.job_dir.exists():
            logger.info("removing stale workspace %s", handle.job_dir)
            shutil.rmtree(handle.job_dir)
        handle.job_dir.mkdir()
        for sub in (handle.source_dir, handle.artifact_dir, handle.log_dir):
            sub.mkdir()
    except OSError as exc:
        raise InfrastructureError(f"cannot allocate workspace {handle.job_dir}: {exc}") from exc
    return handle


def _git(handle: WorkspaceHandle, *args: str, cancel: CancelToken | None = None) -> int:
    outcome = run_process(
        ["git", *_GIT_IDENTITY, *args],
        cwd=handle.source_dir,
        env={**os.environ, "GIT_TERMINAL_PROMPT": "0"},
        timeout=GIT_TIMEOUT_SEC,
        log_path=handle.log_dir / "merge.txt",
        cancel=cancel,
    )
    if outcome.spawn_error:
        raise InfrastructureError(f"cannot run git: {outcome.spawn_error}")
    if outcome.timed_out:
        raise InfrastructureError(f"git {args[0]} timed out")
    return outcome.exit_code if outcome.exit_code is not None else -1


def _git_output(handle: WorkspaceHandle, *args: str) -> str:
    proc = subprocess.run(["git", *args], cwd=handle.source_dir, capture_output=True, text=True,
                          timeout=GIT_TIMEOUT_SEC, check=False)
    if proc.returncode != 0:
        raise InfrastructureError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
    return proc.stdout


def prepare_sources(
    handle: WorkspaceHandle,
    event: CommitEvent,
    repo_url: str,
    cancel: CancelToken | None = None,
) -> MergedTree:
    """Check out the target branch in ``src/`` and merge the change's head on top."""
    target = f"refs/remotes/target/{event.target_ref}"
    source = f"refs/remotes/source/{event.source_ref}"
    if _git(handle, "init", "-q", ".", cancel=cancel) != 0:
        raise InfrastructureError("git init failed", log_path=handle.log_dir / "merge.txt")
    fetched = _git(handle, "fetch", "-q", "--no-tags", repo_url,
                   f"+refs/heads/{event.target_ref}:{target}",
                   f"+refs/heads/{event.source_ref}:{source}", cancel=cancel)
    if fetched != 0:
        raise InfrastructureError(f"fetch from {repo_url} failed (exit {fetched})",
                                  exit_code=fetched, log_path=handle.log_dir / "merge.txt")
    if _git(handle, "cat-file", "-e", f"{event.head_sha}^{{commit}}", cancel=cancel) != 0:
        raise InfrastructureError(f"head {event.head_sha} not found after fetch",
                                  log_path=handle.log_dir / "merge.txt")
    if _git(handle, "checkout", "-q", "-B", "taos-merge", target, cancel=cancel) != 0:
        raise InfrastructureError(f"cannot check out {event.target_ref}")
    base_sha = _git_output(handle, "rev-parse", "HEAD").strip()

    merged = _git(handle, "merge", "-q", "--no-ff", "--no-edit", "-m",
                  f"taoslite merge of {event.head_sha}", event.head_sha, cancel=cancel)
    if merged != 0:
        conflicted = sorted(set(_git_output(handle, "diff", "--name-only", "--diff-filter=U").split()))
        if conflicted:
            raise MergeConflict(conflicted)
        raise InfrastructureError(f"merge failed (exit {merged})", exit_code=merged,
                                  log_path=handle.log_dir / "merge.txt")
    merge_sha = _git_output(handle, "rev-parse", "HEAD").strip()
    changed = tuple(line for line in _git_output(handle, "diff", "--name-only", base_sha, "HEAD").splitlines() if line)
    return MergedTree(changed_files=changed, base_sha=base_sha, merge_sha=merge_sha)


def prepare_dependencies(
    handle: WorkspaceHandle,
    profile: PlatformProfile,
    cancel: CancelToken | None = None,
) -> None:
    if profile.dependency_command is None:
        return
    log_path = handle.log_dir / "deps.txt"
    env = {
        **os.environ,
        "TAOS_WORKSPACE": str(handle.job_dir),
        "TAOS_SOURCE_DIR": str(handle.source_dir),
        "TAOS_PROFILE": profile.name,
    }
    outcome = run_process([str(profile.dependency_command)], cwd=handle.job_dir, env=env,
                          timeout=profile.build_timeout_sec, log_path=log_path, cancel=cancel)
    if outcome.spawn_error:
        raise InfrastructureError(f"dependency command for {profile.name}: {outcome.spawn_error}",
                                  log_path=log_path)
    if outcome.cancelled:
        return
    if outcome.timed_out or outcome.exit_code != 0:
        raise InfrastructureError(
            f"dependency command for {profile.name} exited {outcome.exit_code}"
            + (" (timed out)" if outcome.timed_out else ""),
            exit_code=outcome.exit_code,
            log_path=log_path,
        )


def release(handle: WorkspaceHandle, job_outcome: JobState, keep_failed: bool) -> bool:
    """Delete the job directory unless it failed and ``keep_failed`` is set. Returns True if deleted."""
    if keep_failed and job_outcome is JobState.FAILED:
        logger.info("keeping failed workspace %s", handle.job_dir)
        return False
    try:
        shutil.rmtree(handle.job_dir)
    except FileNotFoundError:
        pass
    except OSError as exc:
        logger.warning("could not remove workspace %s: %s", handle.job_dir, exc)
        return False
    return True
