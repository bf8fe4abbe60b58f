"""Per-job inspection pipeline: format checks, platform builds, then audit checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from taoslite import builder, workspace
from taoslite.modulator import Phase, PluginContext, PluginResult, Verdict, compute_shared_context, run_plugin
from taoslite.process import CancelToken
from taoslite.scheduler import JobState
from taoslite.workspace import InfrastructureError, MergeConflict

if TYPE_CHECKING:
    from collections.abc import Sequence

    from taoslite.builder import BuildOutcome
    from taoslite.config import EngineConfig
    from taoslite.modulator import ExecutionPlan
    from taoslite.scheduler import Job

logger = logging.getLogger(__name__)

ResultHook = Callable[[PluginResult], None]


@dataclass
class PhaseReport:
    phase: Phase
    results: list[PluginResult] = field(default_factory=list)
    duration_ms: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> Verdict:
        return Verdict.FAIL if any(r.blocking_failure for r in self.results) else Verdict.PASS

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "verdict": self.verdict.value,
            "duration_ms": self.duration_ms,
            "results": [r.to_dict() for r in self.results],
            "notes": list(self.notes),
        }


@dataclass
class JobReport:
    job_id: int
    format: PhaseReport | None
    builds: list[BuildOutcome] = field(default_factory=list)
    audit: PhaseReport | None = None
    final_verdict: Verdict = Verdict.FAIL
    notes: list[str] = field(default_factory=list)
    plan_version: int | None = None
    killed: bool = False
    infrastructure_error: bool = False
    trace: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.final_verdict is Verdict.PASS

    @property
    def builder_invocations(self) -> int:
        return sum(1 for t in self.trace if t["kind"] == "build")

    @property
    def plugin_results(self) -> list[PluginResult]:
        out = list(self.format.results) if self.format else []
        if self.audit:
            out.extend(self.audit.results)
        return out

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "final_verdict": self.final_verdict.value,
            "format": self.format.to_dict() if self.format else None,
            "builds": [b.to_dict() for b in self.builds],
            "audit": self.audit.to_dict() if self.audit else None,
            "notes": list(self.notes),
            "plan_version": self.plan_version,
            "killed": self.killed,
            "infrastructure_error": self.infrastructure_error,
            "trace": list(self.trace),
        }


def run_phase(
    entries: Sequence,
    ctx: PluginContext,
    *,
    cancel: CancelToken | None = None,
    on_result: ResultHook | None = None,
    trace: list[dict] | None = None,
) -> PhaseReport:
    """Run every entry in order; a blocking failure does not stop the remaining plugins."""
    report = PhaseReport(ctx.phase)
    start = time.monotonic()
    for entry in entries:
        if cancel is not None and cancel.cancelled:
            report.notes.append("killed")
            break
        t0 = time.monotonic_ns()
        result = run_plugin(entry, ctx, cancel)
        if trace is not None:
            trace.append({"kind": "plugin", "name": entry.name, "phase": ctx.phase.value,
                          "group": entry.group.value, "start_ns": t0, "end_ns": time.monotonic_ns()})
        report.results.append(result)
        if on_result is not None:
            on_result(result)
        if result.verdict.is_failure and not result.group.blocking:
            report.notes.append(f"warning: staging plugin {entry.name} reported {result.verdict.value} (non-blocking)")
    report.duration_ms = int((time.monotonic() - start) * 1000)
    return report


def run_format(plan: ExecutionPlan, ctx: PluginContext, **kwargs) -> PhaseReport:
    if ctx.phase is not Phase.FORMAT:
        ctx = ctx.for_phase(Phase.FORMAT)
    return run_phase(plan.format_order, ctx, **kwargs)


def run_audit(plan: ExecutionPlan, ctx: PluginContext, **kwargs) -> PhaseReport:
    if ctx.phase is not Phase.AUDIT:
        ctx = ctx.for_phase(Phase.AUDIT, ctx.workspace.artifact_dir)
    return run_phase(plan.audit_order, ctx, **kwargs)


def aggregate(
    format_report: PhaseReport | None,
    builds: Sequence[BuildOutcome],
    audit: PhaseReport | None,
    *,
    job_id: int = 0,
    notes: Sequence[str] = (),
) -> JobReport:
    notes = list(notes)
    format_ok = format_report is not None and format_report.passed
    if format_report is not None:
        notes.extend(format_report.notes)
    if format_report is not None and not format_report.passed:
        failed = [r.plugin for r in format_report.results if r.blocking_failure]
        notes.append("format failed (" + ", ".join(failed) + "): build skipped")
    builds_ok = all(b.success for b in builds)
    for b in builds:
        if not b.success:
            notes.append(f"build failed for profile {b.profile} (exit {b.exit_code})")
    if audit is not None:
        notes.extend(audit.notes)
        if not audit.passed:
            failed = [r.plugin for r in audit.results if r.blocking_failure]
            notes.append("audit failed (" + ", ".join(failed) + ")")
    if format_ok and builds_ok:
        audit_ok = audit.passed if audit is not None else not builds
    else:
        audit_ok = False
    final = Verdict.PASS if (format_ok and builds_ok and audit_ok) else Verdict.FAIL
    return JobReport(job_id=job_id, format=format_report, builds=list(builds), audit=audit,
                     final_verdict=final, notes=notes)


def execute_job(
    job: Job,
    plan: ExecutionPlan,
    config: EngineConfig,
    *,
    cancel: CancelToken | None = None,
    on_result: ResultHook | None = None,
    naive: bool = False,
) -> JobReport:
    """allocate -> merge -> shared context -> format -> builds -> audit -> report -> release."""
    cancel = cancel if cancel is not None else job.cancel
    event = job.event
    trace: list[dict] = []
    handle = None
    fmt: PhaseReport | None = None
    builds: list[BuildOutcome] = []
    audit: PhaseReport | None = None
    notes: list[str] = []
    report: JobReport | None = None

    def killed_report() -> JobReport:
        partial = aggregate(fmt, builds, audit, job_id=job.id, notes=notes)
        partial.final_verdict = Verdict.FAIL
        partial.killed = True
        partial.notes.append("killed")
        return partial

    try:
        handle = workspace.allocate(config.workspace_root, job.id)
        url = config.repo_url_for(event.repo)
        if url is None:
            raise InfrastructureError("repo_url is not configured")
        merged = workspace.prepare_sources(handle, event, url, cancel)
        if cancel.cancelled:
            report = killed_report()
            return report
        ctx = compute_shared_context(event, handle, merged.changed_files, naive=naive)

        fmt = run_format(plan, ctx, cancel=cancel, on_result=on_result, trace=trace)
        if cancel.cancelled:
            report = killed_report()
            return report
        if not fmt.passed:
            report = aggregate(fmt, [], None, job_id=job.id, notes=notes)
            return report

        profiles = builder.detect_profiles(handle, config.platform_profiles)
        if not profiles:
            notes.append("no packaging scripts")
        for profile in profiles:
            workspace.prepare_dependencies(handle, profile, cancel)
            if cancel.cancelled:
                report = killed_report()
                return report
            t0 = time.monotonic_ns()
            outcome = builder.build(handle, profile, cancel)
            trace.append({"kind": "build", "name": profile.name, "phase": "build",
                          "group": None, "start_ns": t0, "end_ns": time.monotonic_ns()})
            builds.append(outcome)
            if cancel.cancelled:
                report = killed_report()
                return report
            if not outcome.success:
                break

        if profiles and all(b.success for b in builds):
            audit = run_audit(plan, ctx.for_phase(Phase.AUDIT, handle.artifact_dir),
                              cancel=cancel, on_result=on_result, trace=trace)
            if cancel.cancelled:
                report = killed_report()
                return report
        report = aggregate(fmt, builds, audit, job_id=job.id, notes=notes)
        return report
    except MergeConflict as exc:
        notes.append(str(exc))
        report = aggregate(None, [], None, job_id=job.id, notes=notes)
        return report
    except InfrastructureError as exc:
        if cancel.cancelled:
            report = killed_report()
            return report
        logger.warning("job %d: infrastructure error: %s", job.id, exc)
        notes.append(f"infrastructure error: {exc}")
        report = aggregate(fmt, builds, audit, job_id=job.id, notes=notes)
        report.final_verdict = Verdict.FAIL
        report.infrastructure_error = True
        return report
    finally:
        if report is not None:
            report.trace = trace
            report.plan_version = plan.version
        if handle is not None:
            _persist_and_release(handle, report, config, cancel)


def _persist_and_release(handle, report: JobReport | None, config: EngineConfig, cancel: CancelToken) -> None:
    if report is not None and handle.log_dir.is_dir():
        try:
            (handle.log_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        except OSError as exc:
            logger.warning("could not persist report for job %d: %s", report.job_id, exc)
    if cancel.cancelled or report is None:
        state = JobState.KILLED if cancel.cancelled else JobState.FAILED
    else:
        state = JobState.SUCCEEDED if report.passed else JobState.FAILED
    workspace.release(handle, state, config.keep_failed_workspaces)
