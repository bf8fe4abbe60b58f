"""Engine configuration: parsing, validation, diffing and hot reload.

File format (UTF-8, line oriented)::

    listen = 127.0.0.1:8020
    webhook_secret = s3cret
    workspace_root = /var/lib/taoslite
    max_run_queue = 4

    [plugin clang-format]
    group = base
    phase = format
    command = plugins/clang-format.sh
    timeout_sec = 300
    enabled = true

    [profile debian-like]
    packaging_script = debian/control
    build_command = builders/deb.sh

Relative paths are resolved against the directory holding the file.
"""

from __future__ import annotations

import os
import re
import shlex
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING

from taoslite.builder import DEFAULT_BUILD_TIMEOUT_SEC, PlatformProfile
from taoslite.modulator import (
    DEFAULT_PLUGIN_TIMEOUT_SEC,
    ExecutionPlan,
    Group,
    Phase,
    PlanBuildError,
    PluginEntry,
    Registry,
    RegistryError,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

_SECTION_RE = re.compile(r"^\[\s*(\w+)\s+([A-Za-z0-9_.\-]+)\s*\]$")
_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}

_TOP_KEYS = {
    "listen", "webhook_secret", "workspace_root", "max_run_queue", "keep_failed_workspaces",
    "repo_url", "reporter_url", "reporter_token", "reporter_retries", "reporter_backoff_sec",
    "sample_interval_sec", "shutdown_grace_sec",
}
_PLUGIN_KEYS = {"group", "phase", "command", "args", "timeout_sec", "enabled"}
_PROFILE_KEYS = {"packaging_script", "build_command", "dependency_command", "build_timeout_sec"}


class ConfigError(ValueError):
    """Base class for configuration problems."""


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int, path: str | os.PathLike | None = None) -> None:
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.message = message
        self.line = line


class ConfigValidationError(ConfigError):
    def __init__(self, problems: Sequence[str]) -> None:
        super().__init__("invalid configuration: " + "; ".join(problems))
        self.problems = list(problems)


@dataclass(frozen=True, slots=True)
class ReporterConfig:
    url: str | None = None
    token: str = ""
    retries: int = 3
    backoff_sec: float = 1.0


@dataclass(frozen=True)
class EngineConfig:
    workspace_root: Path
    webhook_secret: bytes
    listen: tuple[str, int] = ("127.0.0.1", 8020)
    max_run_queue: int = 4
    keep_failed_workspaces: bool = False
    plugins: tuple[PluginEntry, ...] = ()
    platform_profiles: tuple[PlatformProfile, ...] = ()
    reporter: ReporterConfig = field(default_factory=ReporterConfig)
    repo_url: str | None = None
    sample_interval_sec: float = 5.0
    shutdown_grace_sec: float = 10.0
    source_path: Path | None = None

    def validate(self) -> EngineConfig:
        problems = []
        if self.max_run_queue < 1:
            problems.append(f"max_run_queue must be >= 1 (got {self.max_run_queue})")
        for name, count in Counter(p.name for p in self.plugins).items():
            if count > 1:
                problems.append(f"duplicate plugin name {name!r}")
        for name, count in Counter(p.name for p in self.platform_profiles).items():
            if count > 1:
                problems.append(f"duplicate profile name {name!r}")
        if not self.workspace_root.is_dir():
            problems.append(f"workspace_root {str(self.workspace_root)!r} does not exist or is not a directory")
        if not self.webhook_secret:
            problems.append("webhook_secret must not be empty")
        if problems:
            raise ConfigValidationError(problems)
        return self

    def repo_url_for(self, repo: str) -> str | None:
        if self.repo_url is None:
            return None
        return self.repo_url.replace("{repo}", repo)

    @property
    def enabled_plugins(self) -> tuple[PluginEntry, ...]:
        return tuple(p for p in self.plugins if p.enabled)


def _bool(value: str, key: str, line: int) -> bool:
    low = value.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigParseError(f"{key}: expected true or false, got {value!r}", line)


def _int(value: str, key: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigParseError(f"{key}: expected an integer, got {value!r}", line) from None


def _float(value: str, key: str, line: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigParseError(f"{key}: expected a number, got {value!r}", line) from None


def _listen(value: str, line: int) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise ConfigParseError(f"listen: expected host:port, got {value!r}", line)
    return host, _int(port, "listen", line)


def _resolve(base: Path, value: str) -> Path:
    path = Path(value).expanduser()
    return path if path.is_absolute() else (base / path)


def _make_plugin(name: str, keys: dict[str, tuple[str, int]], base: Path, header_line: int) -> PluginEntry:
    for required in ("group", "phase", "command"):
        if required not in keys:
            raise ConfigParseError(f"[plugin {name}] is missing {required!r}", header_line)
    group, gline = keys["group"]
    phase, pline = keys["phase"]
    try:
        group_v = Group(group.lower())
    except ValueError:
        raise ConfigParseError(f"group must be base, good or staging, got {group!r}", gline) from None
    try:
        phase_v = Phase(phase.lower())
    except ValueError:
        raise ConfigParseError(f"phase must be format or audit, got {phase!r}", pline) from None
    timeout = DEFAULT_PLUGIN_TIMEOUT_SEC
    if "timeout_sec" in keys:
        timeout = _int(keys["timeout_sec"][0], "timeout_sec", keys["timeout_sec"][1])
        if timeout < 1:
            raise ConfigParseError("timeout_sec must be a positive integer", keys["timeout_sec"][1])
    enabled = _bool(keys["enabled"][0], "enabled", keys["enabled"][1]) if "enabled" in keys else True
    args = tuple(shlex.split(keys["args"][0])) if "args" in keys else ()
    return PluginEntry(name=name, group=group_v, phase=phase_v, command=_resolve(base, keys["command"][0]),
                       args=args, timeout_sec=timeout, enabled=enabled)


def _make_profile(name: str, keys: dict[str, tuple[str, int]], base: Path, header_line: int) -> PlatformProfile:
    for required in ("packaging_script", "build_command"):
        if required not in keys:
            raise ConfigParseError(f"[profile {name}] is missing {required!r}", header_line)
    script = keys["packaging_script"][0]
    if Path(script).is_absolute() or ".." in Path(script).parts:
        raise ConfigParseError("packaging_script must be a relative path inside the source tree",
                               keys["packaging_script"][1])
    timeout = DEFAULT_BUILD_TIMEOUT_SEC
    if "build_timeout_sec" in keys:
        timeout = _int(keys["build_timeout_sec"][0], "build_timeout_sec", keys["build_timeout_sec"][1])
    dep = _resolve(base, keys["dependency_command"][0]) if "dependency_command" in keys else None
    return PlatformProfile(name=name, packaging_script=script,
                           build_command=_resolve(base, keys["build_command"][0]),
                           dependency_command=dep, build_timeout_sec=timeout)


def parse_config(text: str, base_dir: os.PathLike | str = ".", *, source: os.PathLike | str | None = None) -> EngineConfig:
    """Parse and validate config text. Raises ConfigParseError or ConfigValidationError."""
    base = Path(base_dir)
    top: dict[str, tuple[str, int]] = {}
    sections: list[tuple[str, str, int, dict[str, tuple[str, int]]]] = []
    current = top
    try:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith(("#", ";")):
                continue
            if line.startswith("["):
                m = _SECTION_RE.match(line)
                if not m or m.group(1) not in ("plugin", "profile"):
                    raise ConfigParseError(f"bad section header {line!r}", lineno)
                current = {}
                sections.append((m.group(1), m.group(2), lineno, current))
                continue
            m = _KEY_RE.match(line)
            if not m:
                raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno)
            key, value = m.group(1), m.group(2).strip()
            allowed = _TOP_KEYS if current is top else (_PLUGIN_KEYS if sections[-1][0] == "plugin" else _PROFILE_KEYS)
            if key not in allowed:
                raise ConfigParseError(f"unknown key {key!r}", lineno)
            if key in current:
                raise ConfigParseError(f"duplicate key {key!r}", lineno)
            current[key] = (value, lineno)

        plugins = tuple(_make_plugin(n, k, base, ln) for kind, n, ln, k in sections if kind == "plugin")
        profiles = tuple(_make_profile(n, k, base, ln) for kind, n, ln, k in sections if kind == "profile")
    except ConfigParseError as exc:
        if source is not None:
            raise ConfigParseError(exc.message, exc.line, source) from None
        raise

    missing = [k for k in ("workspace_root", "webhook_secret") if k not in top]
    if missing:
        raise ConfigValidationError([f"missing required key {k!r}" for k in missing])

    def get(key: str, conv, default):
        if key not in top:
            return default
        value, lineno = top[key]
        return conv(value, key, lineno)

    reporter = ReporterConfig(
        url=top["reporter_url"][0] if "reporter_url" in top else None,
        token=top.get("reporter_token", ("", 0))[0],
        retries=get("reporter_retries", _int, 3),
        backoff_sec=get("reporter_backoff_sec", _float, 1.0),
    )
    config = EngineConfig(
        workspace_root=_resolve(base, top["workspace_root"][0]),
        webhook_secret=top["webhook_secret"][0].encode(),
        listen=_listen(*top["listen"]) if "listen" in top else ("127.0.0.1", 8020),
        max_run_queue=get("max_run_queue", _int, 4),
        keep_failed_workspaces=get("keep_failed_workspaces", _bool, False),
        plugins=plugins,
        platform_profiles=profiles,
        reporter=reporter,
        repo_url=top["repo_url"][0] if "repo_url" in top else None,
        sample_interval_sec=get("sample_interval_sec", _float, 5.0),
        shutdown_grace_sec=get("shutdown_grace_sec", _float, 10.0),
        source_path=Path(source) if source is not None else None,
    )
    return config.validate()


def load_config(path: os.PathLike | str) -> EngineConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config(text, base_dir=path.resolve().parent, source=path)


def render_plugin(entry: PluginEntry) -> str:
    """One ``[plugin]`` block in config-file syntax."""
    lines = [
        f"[plugin {entry.name}]",
        f"group = {entry.group.value}",
        f"phase = {entry.phase.value}",
        f"command = {entry.command}",
        f"timeout_sec = {entry.timeout_sec}",
        f"enabled = {'true' if entry.enabled else 'false'}",
    ]
    if entry.args:
        lines.insert(4, f"args = {shlex.join(entry.args)}")
    return "\n".join(lines) + "\n"


# -- diff and reload --------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ConfigDelta:
    plug_ins: tuple[PluginEntry, ...] = ()
    plug_outs: tuple[str, ...] = ()
    changed: tuple[PluginEntry, ...] = ()

    @property
    def empty(self) -> bool:
        return not (self.plug_ins or self.plug_outs or self.changed)

    def describe(self) -> str:
        if self.empty:
            return "no changes"
        parts = []
        if self.plug_ins:
            parts.append("plug-in: " + ", ".join(e.name for e in self.plug_ins))
        if self.plug_outs:
            parts.append("plug-out: " + ", ".join(self.plug_outs))
        if self.changed:
            parts.append("changed: " + ", ".join(e.name for e in self.changed))
        return "\n".join(parts)

    def to_dict(self) -> dict:
        return {
            "plug_ins": [e.name for e in self.plug_ins],
            "plug_outs": list(self.plug_outs),
            "changed": [e.name for e in self.changed],
        }


def diff_plugins(old: Sequence[PluginEntry], new: Sequence[PluginEntry]) -> ConfigDelta:
    old_by_name = {p.name: p for p in old}
    new_by_name = {p.name: p for p in new}
    return ConfigDelta(
        plug_ins=tuple(p for p in new if p.name not in old_by_name),
        plug_outs=tuple(p.name for p in old if p.name not in new_by_name),
        changed=tuple(p for p in new if p.name in old_by_name and old_by_name[p.name] != p),
    )


def diff_config(old: EngineConfig, new: EngineConfig) -> ConfigDelta:
    return diff_plugins(old.plugins, new.plugins)


def apply_delta(plugins: Sequence[PluginEntry], delta: ConfigDelta) -> list[PluginEntry]:
    """Old plugin list + delta -> new plugin list (existing order kept, additions appended)."""
    outs = set(delta.plug_outs)
    changed = {p.name: p for p in delta.changed}
    result = [changed.get(p.name, p) for p in plugins if p.name not in outs]
    present = {p.name for p in result}
    for entry in delta.plug_ins:
        if entry.name in present:
            raise RegistryError(f"plugin {entry.name!r} is already plugged in")
        result.append(entry)
    return result


@dataclass(frozen=True, slots=True)
class ReloadOutcome:
    accepted: bool
    delta: ConfigDelta
    plan_version: int
    active_count: int
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "delta": self.delta.to_dict(),
            "plan_version": self.plan_version,
            "active_count": self.active_count,
            "error": self.error,
        }


def apply_reload(registry: Registry, delta: ConfigDelta, order: Sequence[str] | None = None) -> ReloadOutcome:
    """Apply ``delta`` to the registry's plugin set all-or-nothing.

    ``order`` (plugin names as listed in the new file) fixes the within-group
    ordering; without it, additions land at the end of their group.
    """
    plan: ExecutionPlan = registry.plan
    if delta.empty:
        return ReloadOutcome(True, delta, plan.version, len(plan))
    try:
        plugins = apply_delta(registry.plugins, delta)
        if order is not None:
            rank = {name: i for i, name in enumerate(order)}
            plugins.sort(key=lambda p: rank.get(p.name, len(rank)))
        for entry in (*delta.plug_ins, *delta.changed):
            if entry.enabled and not Path(entry.command).exists():
                raise PlanBuildError([entry.name])
        plan = registry.replace(plugins)
    except (PlanBuildError, RegistryError) as exc:
        current = registry.plan
        return ReloadOutcome(False, delta, current.version, len(current), error=str(exc))
    return ReloadOutcome(True, delta, plan.version, len(plan))


# settings that only take effect on restart
RESTART_ONLY = ("listen", "workspace_root", "max_run_queue")


def merge_for_reload(old: EngineConfig, new: EngineConfig) -> EngineConfig:
    """The config snapshot published after a reload: restart-only settings stay as they were."""
    values = {f.name: getattr(new, f.name) for f in fields(EngineConfig)}
    for name in RESTART_ONLY:
        values[name] = getattr(old, name)
    return EngineConfig(**values)
