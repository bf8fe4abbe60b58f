"""Platform package builder: script-activated profiles run in the job workspace."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from taoslite.process import CancelToken, run_process
from taoslite.workspace import InfrastructureError, WorkspaceHandle, is_within

if TYPE_CHECKING:
    from collections.abc import Sequence

DEFAULT_BUILD_TIMEOUT_SEC = 3600


@dataclass(frozen=True, slots=True)
class PlatformProfile:
    name: str
    packaging_script: str
    build_command: Path
    dependency_command: Path | None = None
    build_timeout_sec: int = DEFAULT_BUILD_TIMEOUT_SEC


@dataclass(frozen=True, slots=True)
class BuildOutcome:
    profile: str
    success: bool
    exit_code: int
    duration_ms: int
    artifacts: tuple[str, ...]
    log_path: str
    cancelled: bool = False

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "success": self.success,
            "exit_code": self.exit_code,
            "duration_ms": self.duration_ms,
            "artifacts": list(self.artifacts),
            "log_path": self.log_path,
        }


def detect_profiles(handle: WorkspaceHandle, profiles: Sequence[PlatformProfile]) -> list[PlatformProfile]:
    """Profiles whose packaging script exists in the merged source tree, in config order."""
    active = []
    for profile in profiles:
        script = handle.source_dir / profile.packaging_script
        if is_within(handle.source_dir, script) and script.is_file():
            active.append(profile)
    return active


def build(handle: WorkspaceHandle, profile: PlatformProfile, cancel: CancelToken | None = None) -> BuildOutcome:
    artifact_dir = handle.artifact_dir / profile.name
    artifact_dir.mkdir(parents=True, exist_ok=True)
    log_path = handle.log_dir / f"build-{profile.name}.txt"
    env = {
        **os.environ,
        "TAOS_ARTIFACT_DIR": str(artifact_dir),
        "TAOS_SOURCE_DIR": str(handle.source_dir),
        "TAOS_PROFILE": profile.name,
    }
    outcome = run_process([str(profile.build_command)], cwd=handle.source_dir, env=env,
                          timeout=profile.build_timeout_sec, log_path=log_path, cancel=cancel)
    if outcome.spawn_error:
        raise InfrastructureError(f"build command for {profile.name}: {outcome.spawn_error}", log_path=log_path)
    if outcome.timed_out:
        with open(log_path, "a") as log:
            log.write(f"\n[taoslite] build timed out after {profile.build_timeout_sec}s\n")
    exit_code = outcome.exit_code if outcome.exit_code is not None else -1
    artifacts = tuple(
        sorted(str(p.relative_to(handle.job_dir)) for p in artifact_dir.rglob("*") if p.is_file())
    )
    return BuildOutcome(
        profile=profile.name,
        success=exit_code == 0 and not outcome.timed_out,
        exit_code=exit_code,
        duration_ms=outcome.duration_ms,
        artifacts=artifacts,
        log_path=str(log_path.relative_to(handle.job_dir)),
        cancelled=outcome.cancelled,
    )
