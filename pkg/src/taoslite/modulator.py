"""Plugin registry and runner.

Plugins are external processes grouped as base, good and staging and run in
that order within each phase (format before the build, audit after it).
Work every plugin would otherwise repeat (commit metadata, changed-file
classification, line counts) is produced once per job in a shared context.
"""

from __future__ import annotations

import enum
import json
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable

from taoslite.process import CancelToken, run_process
from taoslite.workspace import InfrastructureError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from taoslite.webhook import CommitEvent
    from taoslite.workspace import WorkspaceHandle

DEFAULT_PLUGIN_TIMEOUT_SEC = 300
MESSAGE_SEVERITIES = frozenset({"error", "warning", "info"})


class Group(str, enum.Enum):
    BASE = "base"
    GOOD = "good"
    STAGING = "staging"

    @property
    def rank(self) -> int:
        return _GROUP_RANK[self]

    @property
    def blocking(self) -> bool:
        return self is not Group.STAGING


_GROUP_RANK = {Group.BASE: 0, Group.GOOD: 1, Group.STAGING: 2}


class Phase(str, enum.Enum):
    FORMAT = "format"
    AUDIT = "audit"


class Verdict(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    SKIPPED = "skipped"
    TIMED_OUT = "timed_out"
    CRASHED = "crashed"

    @classmethod
    def from_exit_code(cls, code: int) -> Verdict:
        return {0: cls.PASS, 1: cls.FAIL, 2: cls.SKIPPED}.get(code, cls.CRASHED)

    @property
    def is_failure(self) -> bool:
        return self in (Verdict.FAIL, Verdict.TIMED_OUT, Verdict.CRASHED)


class RegistryError(ValueError):
    """A plug-in/plug-out request violated its precondition; the plan is unchanged."""


class PlanBuildError(ValueError):
    """Enabled plugins whose command is not executable."""

    def __init__(self, names: Sequence[str]) -> None:
        super().__init__("plugin command missing or not executable: " + ", ".join(names))
        self.names = tuple(names)


@dataclass(frozen=True, slots=True)
class PluginEntry:
    name: str
    group: Group
    phase: Phase
    command: Path
    args: tuple[str, ...] = ()
    timeout_sec: int = DEFAULT_PLUGIN_TIMEOUT_SEC
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.timeout_sec < 1:
            raise ValueError(f"plugin {self.name}: timeout_sec must be >= 1")


def _is_executable(path: Path) -> bool:
    return path.is_file() and os.access(path, os.X_OK)


@dataclass(frozen=True, slots=True)
class ExecutionPlan:
    version: int
    format_order: tuple[PluginEntry, ...]
    audit_order: tuple[PluginEntry, ...]

    def order(self, phase: Phase) -> tuple[PluginEntry, ...]:
        return self.format_order if phase is Phase.FORMAT else self.audit_order

    @property
    def entries(self) -> tuple[PluginEntry, ...]:
        return self.format_order + self.audit_order

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.format_order) + len(self.audit_order)

    def same_plugins(self, other: ExecutionPlan) -> bool:
        return self.format_order == other.format_order and self.audit_order == other.audit_order


def _ordered(entries: Iterable[PluginEntry], phase: Phase) -> tuple[PluginEntry, ...]:
    # sorted() is stable, so config order survives within each group
    return tuple(sorted((e for e in entries if e.phase is phase), key=lambda e: e.group.rank))


def build_plan(plugins: Sequence[PluginEntry], previous: ExecutionPlan | None = None) -> ExecutionPlan:
    names = [p.name for p in plugins]
    dupes = sorted(n for n, c in Counter(names).items() if c > 1)
    if dupes:
        raise RegistryError("duplicate plugin names: " + ", ".join(dupes))
    enabled = [p for p in plugins if p.enabled]
    missing = [p.name for p in enabled if not _is_executable(p.command)]
    if missing:
        raise PlanBuildError(missing)
    version = previous.version + 1 if previous is not None else 1
    return ExecutionPlan(version, _ordered(enabled, Phase.FORMAT), _ordered(enabled, Phase.AUDIT))


def plug_in(plan: ExecutionPlan, entry: PluginEntry) -> ExecutionPlan:
    if entry.name in plan.names:
        raise RegistryError(f"plugin {entry.name!r} is already plugged in")
    if not entry.enabled:
        raise RegistryError(f"plugin {entry.name!r} is disabled")
    if not _is_executable(entry.command):
        raise PlanBuildError([entry.name])
    # appending then re-sorting puts the entry at the end of its group
    entries = list(plan.entries) + [entry]
    return ExecutionPlan(plan.version + 1, _ordered(entries, Phase.FORMAT), _ordered(entries, Phase.AUDIT))


def plug_out(plan: ExecutionPlan, name: str) -> ExecutionPlan:
    if name not in plan.names:
        raise RegistryError(f"plugin {name!r} is not plugged in")
    entries = [e for e in plan.entries if e.name != name]
    return ExecutionPlan(plan.version + 1, _ordered(entries, Phase.FORMAT), _ordered(entries, Phase.AUDIT))


class Registry:
    """Holds the active plan. Readers grab ``plan`` once per job; writers swap it atomically."""

    def __init__(self, plugins: Sequence[PluginEntry] = ()) -> None:
        self._lock = threading.Lock()
        self._plugins: tuple[PluginEntry, ...] = tuple(plugins)
        self._plan = build_plan(self._plugins)

    @property
    def plan(self) -> ExecutionPlan:
        return self._plan

    @property
    def plugins(self) -> tuple[PluginEntry, ...]:
        return self._plugins

    def replace(self, plugins: Sequence[PluginEntry]) -> ExecutionPlan:
        """Publish a plan for ``plugins``; on error the current plan stays active."""
        with self._lock:
            plan = build_plan(plugins, previous=self._plan)
            self._plugins = tuple(plugins)
            self._plan = plan
            return plan

    def plug_in(self, entry: PluginEntry) -> ExecutionPlan:
        with self._lock:
            if any(p.name == entry.name for p in self._plugins if not p.enabled):
                raise RegistryError(f"plugin {entry.name!r} is configured but disabled")
            self._plan = plug_in(self._plan, entry)
            self._plugins = self._plugins + (entry,)
            return self._plan

    def plug_out(self, name: str) -> ExecutionPlan:
        with self._lock:
            self._plan = plug_out(self._plan, name)
            self._plugins = tuple(p for p in self._plugins if p.name != name)
            return self._plan


# -- shared context -----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ProducerInput:
    event: CommitEvent
    workspace: WorkspaceHandle
    changed_files: tuple[str, ...]


Producer = Callable[[ProducerInput], "dict[str, str]"]


def commit_metadata(inp: ProducerInput) -> dict[str, str]:
    ev = inp.event
    return {
        "commit.repo": ev.repo,
        "commit.change_id": str(ev.change_id),
        "commit.head_sha": ev.head_sha,
        "commit.author": ev.author,
        "commit.source_ref": ev.source_ref,
        "commit.target_ref": ev.target_ref,
    }


def classify_files(inp: ProducerInput) -> dict[str, str]:
    counts = Counter(Path(f).suffix.lstrip(".") or "<none>" for f in inp.changed_files)
    values = {f"files.ext.{ext}": str(n) for ext, n in sorted(counts.items())}
    values["files.total"] = str(len(inp.changed_files))
    return values


def count_lines(inp: ProducerInput) -> dict[str, str]:
    total = 0
    for rel in inp.changed_files:
        path = inp.workspace.source_dir / rel
        try:
            with open(path, "rb") as fh:
                total += sum(1 for _ in fh)
        except OSError:
            continue  # deleted by the change
    return {"lines.changed_files": str(total)}


DEFAULT_PRODUCERS: dict[str, Producer] = {
    "commit_metadata": commit_metadata,
    "classify_files": classify_files,
    "count_lines": count_lines,
}


def simulated_setup(setup_ms: int) -> Producer:
    """Producer that stands in for an expensive shared preparation step.

    It busy-waits rather than sleeps: real preparation is CPU work, and an idle CPU
    makes the next few plugin spawns measurably slower.
    """

    def produce(inp: ProducerInput) -> dict[str, str]:
        end = time.perf_counter() + setup_ms / 1000
        while time.perf_counter() < end:
            pass
        return {"setup.ms": str(setup_ms)}

    return produce


@dataclass
class PluginContext:
    workspace: WorkspaceHandle
    event: CommitEvent
    changed_files: tuple[str, ...]
    phase: Phase = Phase.FORMAT
    artifact_dir: Path | None = None
    producers: dict[str, Producer] = field(default_factory=lambda: dict(DEFAULT_PRODUCERS))
    naive: bool = False
    invocations: Counter = field(default_factory=Counter)
    _values: dict[str, str] | None = field(default=None, repr=False)

    @property
    def changed_files_path(self) -> Path:
        return self.workspace.log_dir / "changed-files.txt"

    @property
    def shared_values(self) -> dict[str, str]:
        if self._values is None:
            self.materialize()
        assert self._values is not None
        return self._values

    def materialize(self) -> None:
        """Run every producer. In shared mode this happens once; naive mode re-runs per call."""
        if self._values is not None and not self.naive:
            return
        inp = ProducerInput(self.event, self.workspace, self.changed_files)
        values: dict[str, str] = {}
        for name, producer in self.producers.items():
            self.invocations[name] += 1
            try:
                values.update(producer(inp))
            except Exception as exc:  # noqa: BLE001
                raise InfrastructureError(f"shared-context producer {name} failed: {exc}") from exc
        self._values = values
        self.changed_files_path.write_text("".join(f"{f}\n" for f in self.changed_files))
        (self.workspace.log_dir / "shared.json").write_text(json.dumps(values, indent=2, sort_keys=True))

    def for_phase(self, phase: Phase, artifact_dir: Path | None = None) -> PluginContext:
        # shares the same values and counters; only phase-specific fields differ
        ctx = replace(self, phase=phase, artifact_dir=artifact_dir)
        ctx.invocations = self.invocations
        return ctx


def compute_shared_context(
    event: CommitEvent,
    handle: WorkspaceHandle,
    changed_files: Sequence[str],
    *,
    producers: dict[str, Producer] | None = None,
    naive: bool = False,
    lazy: bool = False,
) -> PluginContext:
    ctx = PluginContext(
        workspace=handle,
        event=event,
        changed_files=tuple(changed_files),
        producers=dict(DEFAULT_PRODUCERS if producers is None else producers),
        naive=naive,
    )
    if not lazy:
        ctx.materialize()
    return ctx


# -- plugin execution -------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Message:
    severity: str
    text: str
    file: str | None = None
    line: int | None = None

    def to_dict(self) -> dict:
        out: dict = {"severity": self.severity, "text": self.text}
        if self.file is not None:
            out["file"] = self.file
        if self.line is not None:
            out["line"] = self.line
        return out


@dataclass(frozen=True, slots=True)
class PluginResult:
    plugin: str
    verdict: Verdict
    exit_code: int | None
    duration_ms: int
    messages: tuple[Message, ...] = ()
    group: Group = Group.BASE
    phase: Phase = Phase.FORMAT

    @property
    def blocking_failure(self) -> bool:
        return self.group.blocking and self.verdict.is_failure

    def to_dict(self) -> dict:
        return {
            "plugin": self.plugin,
            "group": self.group.value,
            "phase": self.phase.value,
            "verdict": self.verdict.value,
            "exit_code": self.exit_code,
            "duration_ms": self.duration_ms,
            "messages": [m.to_dict() for m in self.messages],
        }


def parse_report(text: str) -> tuple[Message, ...]:
    """Parse a plugin report file. Raises ValueError on anything off-contract."""
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("report must be a JSON array")
    messages = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ValueError(f"report[{i}] is not an object")
        severity, body = item.get("severity"), item.get("text")
        if severity not in MESSAGE_SEVERITIES:
            raise ValueError(f"report[{i}].severity invalid: {severity!r}")
        if not isinstance(body, str):
            raise ValueError(f"report[{i}].text must be a string")
        file, line = item.get("file"), item.get("line")
        if file is not None and not isinstance(file, str):
            raise ValueError(f"report[{i}].file must be a string")
        if line is not None and (not isinstance(line, int) or isinstance(line, bool)):
            raise ValueError(f"report[{i}].line must be an integer")
        messages.append(Message(severity, body, file, line))
    return tuple(messages)


def plugin_env(entry: PluginEntry, ctx: PluginContext, report_path: Path) -> dict[str, str]:
    env = dict(os.environ)
    env.update({
        "TAOS_PHASE": ctx.phase.value,
        "TAOS_WORKSPACE": str(ctx.workspace.job_dir),
        "TAOS_SOURCE_DIR": str(ctx.workspace.source_dir),
        "TAOS_CHANGED_FILES": str(ctx.changed_files_path),
        "TAOS_REPORT": str(report_path),
        "TAOS_CHANGE_ID": str(ctx.event.change_id),
        "TAOS_HEAD_SHA": ctx.event.head_sha,
        "TAOS_REPO": ctx.event.repo,
    })
    if ctx.phase is Phase.AUDIT:
        env["TAOS_ARTIFACT_DIR"] = str(ctx.artifact_dir or ctx.workspace.artifact_dir)
    else:
        env.pop("TAOS_ARTIFACT_DIR", None)
    return env


def run_plugin(entry: PluginEntry, ctx: PluginContext, cancel: CancelToken | None = None) -> PluginResult:
    ctx.materialize()
    report_path = ctx.workspace.log_dir / f"report-{entry.name}.json"
    report_path.unlink(missing_ok=True)
    outcome = run_process(
        [str(entry.command), *entry.args],
        cwd=ctx.workspace.source_dir,
        env=plugin_env(entry, ctx, report_path),
        timeout=entry.timeout_sec,
        log_path=ctx.workspace.log_dir / f"plugin-{entry.name}.txt",
        cancel=cancel,
    )

    def result(verdict: Verdict, messages: tuple[Message, ...] = ()) -> PluginResult:
        return PluginResult(entry.name, verdict, outcome.exit_code, outcome.duration_ms,
                            messages, entry.group, entry.phase)

    if outcome.spawn_error:
        return result(Verdict.CRASHED, (Message("error", f"spawn failed: {outcome.spawn_error}"),))
    if outcome.timed_out:
        return result(Verdict.TIMED_OUT, (Message("error", f"timed out after {entry.timeout_sec}s"),))
    if outcome.cancelled:
        return result(Verdict.CRASHED, (Message("error", "killed: job cancelled"),))
    verdict = Verdict.from_exit_code(outcome.exit_code if outcome.exit_code is not None else -1)
    messages: tuple[Message, ...] = ()
    if report_path.exists():
        try:
            messages = parse_report(report_path.read_text(encoding="utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            messages = (Message("warning", f"malformed report file ignored: {exc}"),)
    return result(verdict, messages)
