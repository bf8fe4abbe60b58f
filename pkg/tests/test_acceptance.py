"""Exit criteria. Each test prints one ``criterion N [PASS|FAIL]`` line (also gathered in the summary)."""

from __future__ import annotations

import gc
import json
import random
import subprocess
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    make_event,
    pid_gone,
    pr_payload,
    replay_file,
    signed_headers,
    wait_until,
    write_script,
)
from taoslite.cli import main
from taoslite.config import load_config, parse_config
from taoslite.engine import Engine, control_request
from taoslite.metrics import sample_self, thread_count
from taoslite.mockhost import MockCodeHost
from taoslite.modulator import Group, Phase, Registry, Verdict
from taoslite.pipeline import JobReport, PhaseReport, execute_job
from taoslite.reporter import CONTEXTS
from taoslite.scheduler import Job, JobState
from taoslite.webhook import sign, verify_signature

pytestmark = pytest.mark.acceptance

TABLE_DELTAS = [+12, -2, +1, -1, -1, -1, +2, -1, -1, -1, +1, -1]
TABLE_TRACE = [12, 10, 11, 10, 9, 8, 10, 9, 8, 7, 8, 7]


# -- criteria 1 and 7: scheduler stress ------------------------------------------------

STRESS_CAPS = (1, 2, 4, 8)
STRESS_SUBMISSIONS = 1000


@dataclass
class CapRun:
    cap: int
    submitted: int = 0
    bound_violations: int = 0
    fifo_inversions: int = 0
    unstarted_live: int = 0
    started: int = 0
    replaced: int = 0
    killed: int = 0
    max_running_seen: int = 0
    max_threads: int = 0
    thread_limit: int = 0


@dataclass
class StressResult:
    runs: list[CapRun] = field(default_factory=list)
    base_threads: int = 0
    res_before_kb: int = 0
    res_after_kb: int = 0
    elapsed_s: float = 0.0


def _idle_res_kb() -> int:
    gc.collect()
    time.sleep(0.2)
    return sample_self().res_kb


def _stress_one(cap: int, n: int, ws_root: Path, rng: random.Random, base_threads: int) -> CapRun:
    run = CapRun(cap, thread_limit=base_threads + cap + 2)
    lock = threading.Lock()
    durations = {}
    engine: Engine

    def synthetic(job: Job) -> JobReport:
        running = engine.scheduler.running_count
        threads = thread_count()
        with lock:
            run.max_running_seen = max(run.max_running_seen, running)
            run.max_threads = max(run.max_threads, threads)
            if running > cap:
                run.bound_violations += 1
        job.cancel.wait(durations[job.id])
        return JobReport(job.id, PhaseReport(Phase.FORMAT), final_verdict=Verdict.PASS)

    cfg = parse_config(f"workspace_root = {ws_root}\nwebhook_secret = s\nmax_run_queue = {cap}\n"
                       "sample_interval_sec = 0.05\n")
    engine = Engine(cfg, job_runner=synthetic).start(listen=False, control=False)
    try:
        for _ in range(n):
            event = make_event(rng.randint(1, 120), head=f"{rng.getrandbits(160):040x}")
            _submit_with_duration(engine, event, durations, rng)
            if rng.random() < 0.3:
                time.sleep(rng.uniform(0, 0.01))
            snap = engine.scheduler.snapshot()
            with lock:
                run.max_running_seen = max(run.max_running_seen, len(snap.running))
                if len(snap.running) > cap:
                    run.bound_violations += 1
            run.submitted += 1
        assert engine.scheduler.wait_idle(60)
        run.max_threads = max(run.max_threads, engine.metrics.peak_threads, thread_count())
    finally:
        engine.shutdown(grace=5)

    jobs = list(engine.scheduler.jobs.values())
    started = sorted((j for j in jobs if j.start_seq is not None), key=lambda j: j.start_seq)
    run.started = len(started)
    run.fifo_inversions = sum(1 for a, b in zip(started, started[1:]) if a.id > b.id)
    run.unstarted_live = sum(1 for j in jobs if j.state is not JobState.REPLACED and j.start_seq is None)
    run.replaced = sum(1 for j in jobs if j.state is JobState.REPLACED)
    run.killed = sum(1 for j in jobs if j.state is JobState.KILLED)
    return run


def _submit_with_duration(engine: Engine, event, durations: dict, rng: random.Random) -> None:
    # the duration table is keyed by job id; fill it for the next id before submit can dispatch it
    next_id = len(engine.scheduler.jobs) + 1
    durations[next_id] = rng.uniform(0.010, 0.050)
    job_id = engine.submit(event).job_id
    assert job_id == next_id


@pytest.fixture(scope="module")
def stress(tmp_path_factory) -> StressResult:
    ws_root = tmp_path_factory.mktemp("stress-ws")
    rng = random.Random(20240501)
    result = StressResult()
    result.base_threads = thread_count()
    result.res_before_kb = _idle_res_kb()
    t0 = time.monotonic()
    per_cap = STRESS_SUBMISSIONS // len(STRESS_CAPS)
    for cap in STRESS_CAPS:
        result.runs.append(_stress_one(cap, per_cap, ws_root, rng, result.base_threads))
    result.elapsed_s = time.monotonic() - t0
    result.res_after_kb = _idle_res_kb()
    return result


@pytest.mark.criterion(1, "scheduler FIFO and run-queue bound under randomized stress")
def test_c1_scheduler_fifo_and_bound(criterion, stress):
    total = sum(r.submitted for r in stress.runs)
    summary = ", ".join(f"cap={r.cap}: started={r.started} replaced={r.replaced} killed={r.killed} "
                        f"max_running={r.max_running_seen}" for r in stress.runs)
    criterion.note(summary)
    assert total == STRESS_SUBMISSIONS
    assert sum(r.bound_violations for r in stress.runs) == 0
    assert all(r.max_running_seen <= r.cap for r in stress.runs)
    assert sum(r.fifo_inversions for r in stress.runs) == 0
    assert sum(r.unstarted_live for r in stress.runs) == 0
    # the bound is reached, so the check is not vacuous
    assert all(r.max_running_seen == r.cap for r in stress.runs)
    assert stress.elapsed_s < 60
    criterion.ok(f"{total} submissions, 0 violations, 0 inversions, {stress.elapsed_s:.1f}s; {summary}")


@pytest.mark.criterion(7, "thread count and idle RES stay bounded over the stress run")
def test_c7_thread_and_memory_thrift(criterion, stress):
    detail = (f"base_threads={stress.base_threads}, "
              + ", ".join(f"cap={r.cap}: max={r.max_threads}/limit={r.thread_limit}" for r in stress.runs)
              + f"; idle RES {stress.res_before_kb} -> {stress.res_after_kb} KiB")
    criterion.note(detail)
    assert all(r.max_threads <= r.thread_limit for r in stress.runs)
    assert stress.res_after_kb <= 2 * stress.res_before_kb
    criterion.ok(detail)


# -- criterion 2: victim maker ----------------------------------------------------------


@pytest.mark.criterion(2, "victim maker kills the older duplicate and its child processes")
def test_c2_victim_maker(criterion, config_writer, git_repo, tmp_path):
    t_start = time.monotonic()
    marks = tmp_path / "marks"
    marks.mkdir()
    config_writer.top["repo_url"] = git_repo.url_template()
    config_writer.plugin("hold", body=f"""
        if [ -f "{marks}/slow-$TAOS_HEAD_SHA" ]; then
            sleep 60 &
            echo "$$ $!" > "{marks}/pids-$TAOS_HEAD_SHA"
            wait
        fi
        exit 0
    """)
    old_head = git_repo.commit("feature", {"a.c": "1\n"})
    (marks / f"slow-{old_head}").touch()
    engine = Engine(config_writer.load()).start(listen=False, control=False)
    try:
        old = engine.submit(make_event(5, head=old_head)).job_id
        assert wait_until(lambda: (marks / f"pids-{old_head}").exists(), timeout=10)
        assert engine.scheduler.jobs[old].state is JobState.RUNNING
        pids = [int(p) for p in (marks / f"pids-{old_head}").read_text().split()]

        new_head = git_repo.commit("feature", {"a.c": "2\n"})
        t_kill = time.monotonic()
        new = engine.submit(make_event(5, head=new_head)).job_id
        assert engine.scheduler.jobs[old].state is JobState.KILLED
        assert wait_until(lambda: all(pid_gone(p) for p in pids), timeout=5.0)
        gone_after = time.monotonic() - t_kill
        assert engine.scheduler.wait_idle(10)
        assert engine.scheduler.jobs[new].state is JobState.SUCCEEDED
        assert engine.reports[new].passed
    finally:
        engine.shutdown(grace=0)
    elapsed = time.monotonic() - t_start
    assert elapsed < 15
    criterion.ok(f"job {old} Killed, {len(pids)} plugin processes gone {gone_after:.2f}s after the duplicate, "
                 f"job {new} Succeeded, {elapsed:.1f}s")


# -- criterion 3: format short-circuit ------------------------------------------------------


@pytest.mark.criterion(3, "failing Base format plugin skips the builder and audit")
def test_c3_format_short_circuit(criterion, config_writer, git_repo, tmp_path):
    t_start = time.monotonic()
    marks = tmp_path / "marks"
    marks.mkdir()
    head = git_repo.commit("feature", {"package.sh": "#!/bin/sh\n", "bad.c": "int x\n"})
    with MockCodeHost() as host:
        config_writer.top.update(repo_url=git_repo.url_template(), reporter_url=host.url,
                                 reporter_backoff_sec="0.05")
        config_writer.plugin("style", "base", "format", body='echo \'[{"severity":"error","text":"missing ;"}]\' '
                                                             '> "$TAOS_REPORT"; exit 1')
        config_writer.plugin("audit-check", "base", "audit", body=f'touch "{marks}/audit-ran"')
        config_writer.profile("pkg", "package.sh", f'touch "{marks}/build-$$"')
        engine = Engine(config_writer.load()).start(listen=False, control=False)
        try:
            ev = make_event(3, head=head)
            jid = engine.submit(ev).job_id
            assert engine.scheduler.wait_idle(5)
            assert host.wait_for(lambda h: len(h.statuses(head)) >= 8, timeout=5)
        finally:
            engine.shutdown(grace=0)
        report = engine.reports[jid]
        build_status = [s for s in host.statuses(head) if s["context"] == "taos/build"][-1]
    builds_on_disk = list(marks.glob("build-*"))
    criterion.note(f"builder_invocations={report.builder_invocations}, build marks={len(builds_on_disk)}, "
                   f"taos/build={build_status['state']}:{build_status['description']}")
    assert report.final_verdict is Verdict.FAIL
    assert report.builder_invocations == 0 and builds_on_disk == []
    assert report.audit is None and not (marks / "audit-ran").exists()
    assert build_status["state"] == "error" and "skipped" in build_status["description"]
    elapsed = time.monotonic() - t_start
    assert elapsed < 5
    criterion.ok(f"builder invoked 0 times, audit absent, taos/build: error "
                 f"({build_status['description']}), {elapsed:.1f}s")


# -- criterion 4: group ordering ----------------------------------------------------------


@pytest.mark.criterion(4, "Base < Good < Staging in both phases over 50 shuffled configs")
def test_c4_group_ordering(criterion, git_repo, ws_root, tmp_path):
    t_start = time.monotonic()
    trace = tmp_path / "trace.txt"
    plugin = write_script(tmp_path / "record.sh", f'echo "$TAOS_PHASE $1 $2" >> "{trace}"\n')
    builder = write_script(tmp_path / "build.sh", "exit 0\n")
    head = git_repo.commit("feature", {"package.sh": "", "x.c": "int x;\n"})
    specs = [(f"{g.value}-{ph.value}-{k}", g, ph) for g in Group for ph in Phase for k in range(2)]
    assert len(specs) == 12 and all(sum(1 for s in specs if s[1] is g) == 4 for g in Group)
    rng = random.Random(4)
    checked = 0
    for i in range(1, 51):
        order = specs[:]
        rng.shuffle(order)
        text = [f"workspace_root = {ws_root}", "webhook_secret = s", f"repo_url = {git_repo.url_template()}"]
        for name, g, ph in order:
            text += [f"[plugin {name}]", f"group = {g.value}", f"phase = {ph.value}",
                     f"command = {plugin}", f"args = {name} {g.value}"]
        text += ["[profile pkg]", "packaging_script = package.sh", f"build_command = {builder}"]
        cfg = parse_config("\n".join(text) + "\n")
        trace.write_text("")
        report = execute_job(Job(i, make_event(1, head=head), -i), Registry(cfg.plugins).plan, cfg)
        assert report.passed, report.notes
        lines = [ln.split() for ln in trace.read_text().splitlines()]
        assert len(lines) == 12
        rank = {g.value: g.rank for g in Group}
        for phase in Phase:
            seen = [(name, grp) for ph, name, grp in lines if ph == phase.value]
            assert len(seen) == 6
            ranks = [rank[grp] for _, grp in seen]
            assert ranks == sorted(ranks), f"config {i}, {phase.value}: {seen}"
            # within a group the config-file order is kept
            for g in Group:
                expected = [n for n, gg, pp in order if gg is g and pp is phase]
                assert [n for n, grp in seen if grp == g.value] == expected
        # all format plugins finish before the build, the build before any audit plugin
        kinds = [t["phase"] for t in report.trace]
        assert kinds == ["format"] * 6 + ["build"] + ["audit"] * 6
        checked += 1
    elapsed = time.monotonic() - t_start
    assert elapsed < 30
    criterion.ok(f"{checked} shuffled configs, 12 plugins each, ordering held in both phases, {elapsed:.1f}s")


# -- criterion 5: reload replay ---------------------------------------------------------------


@pytest.mark.criterion(5, "twelve plug-in/plug-out reloads on a live engine")
def test_c5_reload_replay(criterion, config_writer, git_repo, control_sock, tmp_path):
    t_start = time.monotonic()
    trace = tmp_path / "ran.txt"
    recorder = write_script(tmp_path / "rec.sh", f'echo "$1" >> "{trace}"\n')
    head = git_repo.commit("feature", {"package.sh": "", "y.c": "int y;\n"})
    config_writer.top["repo_url"] = git_repo.url_template()
    config_writer.profile("pkg", "package.sh", "exit 0")
    cfg_path = config_writer.write()
    groups, phases = list(Group), list(Phase)
    fresh = (f"P{i:02d}" for i in range(1, 100))
    active: list[str] = []

    def block(name: str, idx: int) -> dict:
        return {"name": name, "group": groups[idx % 3].value, "phase": phases[idx % 2].value,
                "command": str(recorder), "args": name}

    engine = Engine(load_config(cfg_path)).start(listen=False)
    try:
        control_server = engine.control_server
        assert len(engine.registry.plan) == 0
        counts, versions = [], []
        for delta in TABLE_DELTAS:
            if delta > 0:
                active += [next(fresh) for _ in range(delta)]
            else:
                del active[:-delta]
            config_writer.plugins = [block(n, int(n[1:])) for n in active]
            config_writer.write()
            resp = control_request(control_sock, {"cmd": "reload"})
            assert resp["ok"], resp
            counts.append(resp["reload"]["active_count"])
            versions.append(resp["reload"]["plan_version"])
        criterion.note(f"trace={counts}")
        assert counts == TABLE_TRACE
        assert versions == list(range(2, 2 + len(TABLE_DELTAS)))
        assert engine.control_server is control_server  # same live engine, no restart

        jid = engine.submit(make_event(2, head=head)).job_id
        assert engine.scheduler.wait_idle(20)
        report = engine.reports[jid]
    finally:
        engine.shutdown(grace=0)
    ran = trace.read_text().split()
    assert report.passed, report.notes
    assert sorted(ran) == sorted(active) and len(ran) == 7
    elapsed = time.monotonic() - t_start
    assert elapsed < 30
    criterion.ok(f"trace={counts}, job after step 12 ran {len(ran)} plugins {sorted(ran)}, {elapsed:.1f}s")


# -- criterion 6: shared vs naive context scaling ------------------------------------------------


@pytest.mark.criterion(6, "shared context stays flat while naive grows linearly")
def test_c6_scaling_trend(criterion, tmp_path, capsys):
    t_start = time.monotonic()
    out_csv = tmp_path / "scaling.csv"
    code = main(["metrics", "scaling", "--n", "1..12", "--setup-ms", "200", "--calibrate", "30",
                 "--json", "--out", str(out_csv)])
    data = json.loads(capsys.readouterr().out)
    assert code == 0
    rows = {(r["mode"], r["n_modules"]): r["total_ms"] for r in data["rows"]}
    p95_ms = data["p95_spawn_ms"]
    naive12 = rows[("naive", 12)]
    shared_growth = rows[("shared", 12)] - rows[("shared", 1)]
    budget = 11 * p95_ms * 1.25
    detail = (f"naive(12)={naive12:.0f}ms, shared(12)-shared(1)={shared_growth:.1f}ms, "
              f"budget 11*p95*1.25={budget:.1f}ms (p95 spawn {p95_ms:.2f}ms)")
    criterion.note(detail)
    assert naive12 >= 2400
    assert shared_growth <= budget
    assert out_csv.exists() and (tmp_path / "scaling-scaling.png").exists()
    elapsed = time.monotonic() - t_start
    assert elapsed < 120
    criterion.ok(f"{detail}, {elapsed:.1f}s")


# -- criterion 8: end-to-end golden path ---------------------------------------------------------


HELLO_C = '#include <stdio.h>\nint main(void) { puts("hello from taoslite"); return 0; }\n'


@pytest.mark.criterion(8, "replayed pull request builds, audits and reports four successes")
def test_c8_end_to_end(criterion, config_writer, git_repo, control_sock, tmp_path, capsys):
    t_start = time.monotonic()
    collected = tmp_path / "collected"
    collected.mkdir()
    head = git_repo.commit("feature", {"hello.c": HELLO_C, "build.sh": "#!/bin/sh\n"})
    with MockCodeHost(token="t0k") as host:
        config_writer.top.update(repo_url=git_repo.url_template(), reporter_url=host.url,
                                 reporter_token="t0k", reporter_backoff_sec="0.05")
        config_writer.plugin("changed-files", "base", "format", body='grep -q hello.c "$TAOS_CHANGED_FILES"')
        config_writer.plugin("runs", "good", "audit", body=f"""
            "$TAOS_ARTIFACT_DIR/native/hello" | grep -q "hello from taoslite" || exit 1
            cp "$TAOS_ARTIFACT_DIR/native/hello" "{collected}/hello"
        """)
        config_writer.profile("native", "build.sh", 'cc -O2 -o "$TAOS_ARTIFACT_DIR/hello" hello.c')
        engine = Engine(config_writer.load()).start()
        try:
            event_file = replay_file(tmp_path / "pr.json", pr_payload(number=8, head_sha=head))
            assert main(["replay", str(event_file)]) == 0
            assert "accepted: job 1" in capsys.readouterr().out
            assert wait_until(lambda: engine.scheduler.jobs and engine.scheduler.wait_idle(0), timeout=25)
            assert host.wait_for(lambda h: len(h.statuses(head)) >= 8 and h.comments(), timeout=10)
        finally:
            engine.shutdown(grace=0)
        report = engine.reports[1]
        transcript = [(s["context"], s["state"]) for s in host.statuses(head)]
        comment = host.comments()[0]["body"]
    criterion.note(f"verdict={report.final_verdict.value}, transcript={transcript}")
    assert report.final_verdict is Verdict.PASS, report.notes
    assert report.builds[0].artifacts == ("out/native/hello",)
    out = subprocess.run([str(collected / "hello")], capture_output=True, text=True, check=True).stdout
    assert out.strip() == "hello from taoslite"
    assert transcript == [(c, "pending") for c in CONTEXTS] + [(c, "success") for c in CONTEXTS]
    assert "TOTAL: PASS" in comment
    elapsed = time.monotonic() - t_start
    assert elapsed < 30
    criterion.ok(f"final Pass, artifact out/native/hello runs, 4 pending then 4 success, {elapsed:.1f}s")


# -- criterion 9: signature gate --------------------------------------------------------------------


@pytest.mark.criterion(9, "tampered deliveries are rejected and signatures round-trip")
def test_c9_signature_gate(criterion, config_writer):
    t_start = time.monotonic()
    engine = Engine(config_writer.load()).start(control=False)
    try:
        host, port = engine.webhook_server.address
        original = json.dumps(pr_payload()).encode()
        stale = signed_headers(original)
        tampered = original.replace(b'"dev"', b'"mallory"')
        req = urllib.request.Request(f"http://{host}:{port}/webhook", data=tampered, headers=stale, method="POST")
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=5)
        status = err.value.code
        assert status == 401
        assert engine.scheduler.jobs == {}
    finally:
        engine.shutdown(grace=0)

    examples = [0]

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.binary(max_size=512), st.binary(min_size=1, max_size=64), st.binary(min_size=1, max_size=16))
    def roundtrip(body, secret, tweak):
        examples[0] += 1
        digest = sign(body, secret)
        assert verify_signature(body, digest, secret)
        assert verify_signature(body, "sha256=" + digest, secret)
        if body + tweak != body:
            assert not verify_signature(body + tweak, digest, secret)

    roundtrip()
    elapsed = time.monotonic() - t_start
    assert examples[0] >= 1000
    assert elapsed < 10
    criterion.ok(f"tampered body -> HTTP {status}, 0 jobs; {examples[0]} random (body, secret) pairs round-trip, "
                 f"{elapsed:.1f}s")
