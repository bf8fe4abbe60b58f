from __future__ import annotations

import json
import os
import shutil
import subprocess
import tempfile
import textwrap
import time
from pathlib import Path

import pytest

from taoslite.config import load_config
from taoslite.webhook import CommitEvent, sign

SECRET = "test-secret"


def sha(n: int) -> str:
    return f"{n:040x}"


def make_event(change_id: int = 1, repo: str = "org/app", head: str | None = None, **kw) -> CommitEvent:
    return CommitEvent(repo=repo, change_id=change_id, source_ref=kw.pop("source_ref", "feature"),
                       target_ref=kw.pop("target_ref", "main"), head_sha=head or sha(change_id),
                       author=kw.pop("author", "dev"), **kw)


def pr_payload(repo="org/app", number=7, head_sha="a" * 40, action="opened",
               head_ref="feature", base_ref="main", login="dev") -> dict:
    return {
        "action": action,
        "number": number,
        "repository": {"full_name": repo},
        "pull_request": {
            "head": {"sha": head_sha, "ref": head_ref},
            "base": {"ref": base_ref},
            "user": {"login": login},
        },
    }


def signed_headers(body: bytes, kind: str = "pull_request", secret: str = SECRET) -> dict:
    return {"X-Event-Kind": kind, "X-Signature-256": sign(body, secret.encode())}


def write_script(path: Path, body: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("#!/bin/sh\n" + textwrap.dedent(body).lstrip("\n"))
    path.chmod(0o755)
    return path


def pid_gone(pid: int) -> bool:
    """True once ``pid`` no longer exists or is only a zombie awaiting an absent reaper."""
    try:
        stat = Path(f"/proc/{pid}/stat").read_text()
    except (FileNotFoundError, ProcessLookupError):
        return True
    return stat.rsplit(")", 1)[1].split()[0] in ("Z", "X")


def wait_until(predicate, timeout: float = 10.0, interval: float = 0.02) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


class GitRepo:
    """A bare fixture repository with a target branch and a change branch."""

    def __init__(self, root: Path, name: str = "org/app") -> None:
        self.bare = root / "repos" / f"{name}.git"
        self.work = root / "repo-work" / name
        self.bare.mkdir(parents=True)
        self.work.mkdir(parents=True)
        self._git(self.bare, "init", "-q", "--bare", "-b", "main")
        self._git(self.work, "init", "-q", "-b", "main")
        self._git(self.work, "remote", "add", "origin", str(self.bare))

    @staticmethod
    def _git(cwd: Path, *args: str) -> str:
        env = {**os.environ, "GIT_AUTHOR_NAME": "t", "GIT_AUTHOR_EMAIL": "t@t", "GIT_COMMITTER_NAME": "t",
               "GIT_COMMITTER_EMAIL": "t@t"}
        return subprocess.run(["git", *args], cwd=cwd, env=env, check=True, capture_output=True,
                              text=True).stdout.strip()

    def commit(self, branch: str, files: dict[str, str], message: str = "change", base: str = "main") -> str:
        branches = self._git(self.work, "branch", "--list", branch)
        if branches:
            self._git(self.work, "checkout", "-q", branch)
        elif self._git(self.work, "branch", "--list", base) and branch != base:
            self._git(self.work, "checkout", "-q", "-b", branch, base)
        else:
            self._git(self.work, "checkout", "-q", "-B", branch)
        for rel, content in files.items():
            p = self.work / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(content)
            if rel.endswith(".sh"):
                p.chmod(0o755)
        self._git(self.work, "add", "-A")
        self._git(self.work, "commit", "-q", "-m", message)
        self._git(self.work, "push", "-q", "-f", "origin", f"{branch}:{branch}")
        return self._git(self.work, "rev-parse", "HEAD")

    def url_template(self) -> str:
        return str(self.bare).replace("org/app", "{repo}")


@pytest.fixture
def git_repo(tmp_path: Path) -> GitRepo:
    repo = GitRepo(tmp_path)
    repo.commit("main", {"README": "hello\n", "main.c": "int main(void) { return 0; }\n"}, "initial")
    return repo


@pytest.fixture
def ws_root(tmp_path: Path) -> Path:
    root = tmp_path / "ws"
    root.mkdir()
    return root


class ConfigWriter:
    """Builds config files for tests; plugin scripts are written under ``tmp/plugins``."""

    def __init__(self, tmp: Path, ws_root: Path) -> None:
        self.tmp = tmp
        self.ws_root = ws_root
        self.path = tmp / "taoslite.conf"
        self.top: dict[str, str] = {
            "listen": "127.0.0.1:0",
            "webhook_secret": SECRET,
            "workspace_root": str(ws_root),
            "max_run_queue": "2",
            "sample_interval_sec": "0.2",
            "shutdown_grace_sec": "5",
        }
        self.plugins: list[dict] = []
        self.profiles: list[dict] = []

    def plugin(self, name: str, group: str = "base", phase: str = "format", body: str = "exit 0\n",
               **extra) -> Path:
        script = write_script(self.tmp / "plugins" / f"{name}.sh", body)
        self.plugins.append({"name": name, "group": group, "phase": phase, "command": str(script), **extra})
        return script

    def profile(self, name: str, packaging_script: str, body: str, **extra) -> Path:
        script = write_script(self.tmp / "builders" / f"{name}.sh", body)
        self.profiles.append({"name": name, "packaging_script": packaging_script,
                              "build_command": str(script), **extra})
        return script

    def render(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.top.items()]
        for p in self.plugins:
            lines.append(f"[plugin {p['name']}]")
            lines += [f"{k} = {v}" for k, v in p.items() if k != "name"]
        for p in self.profiles:
            lines.append(f"[profile {p['name']}]")
            lines += [f"{k} = {v}" for k, v in p.items() if k != "name"]
        return "\n".join(lines) + "\n"

    def write(self) -> Path:
        self.path.write_text(self.render())
        return self.path

    def load(self):
        return load_config(self.write())


@pytest.fixture
def config_writer(tmp_path: Path, ws_root: Path) -> ConfigWriter:
    return ConfigWriter(tmp_path, ws_root)


def replay_file(path: Path, payload: dict | None, kind: str = "pull_request") -> Path:
    body = json.dumps(payload) if payload is not None else ""
    path.write_text(json.dumps({"headers": {"X-Event-Kind": kind}, "body": body}))
    return path


@pytest.fixture
def control_sock(monkeypatch):
    """Short control-socket path (unix socket paths are limited to ~108 bytes)."""
    d = Path(tempfile.mkdtemp(prefix="tl-", dir="/tmp"))
    path = d / "c.sock"
    monkeypatch.setenv("TAOSLITE_CONTROL", str(path))
    yield path
    shutil.rmtree(d, ignore_errors=True)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; FAIL unless ``ok`` is called."""

    class Line:
        def __init__(self) -> None:
            self.number = request.node.get_closest_marker("criterion").args[0]
            self.title = request.node.get_closest_marker("criterion").args[1]
            self.detail = ""
            self.passed = False

        def ok(self, detail: str = "") -> None:
            self.passed = True
            self.detail = detail

        def note(self, detail: str) -> None:
            self.detail = detail

    line = Line()
    yield line
    text = f"criterion {line.number} [{'PASS' if line.passed else 'FAIL'}] {line.title}"
    if line.detail:
        text += f" :: {line.detail}"
    print("\n" + text)
    ACCEPTANCE_LINES.append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion metadata")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in sorted(ACCEPTANCE_LINES, key=lambda t: int(t.split()[1])):
            terminalreporter.write_line(text)
