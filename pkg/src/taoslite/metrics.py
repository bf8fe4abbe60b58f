"""Self-observation: memory/thread samples, plugin timings and the module-count scaling harness."""

from __future__ import annotations

import csv
import io
import itertools
import os
import statistics
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

from taoslite import workspace
from taoslite.modulator import (
    DEFAULT_PRODUCERS,
    Group,
    Phase,
    PluginEntry,
    build_plan,
    compute_shared_context,
    run_plugin,
    simulated_setup,
)
from taoslite.pipeline import run_format
from taoslite.scheduler import JobState
from taoslite.webhook import CommitEvent

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

CSV_HEADER = ("kind", "timestamp", "n_modules", "mode", "total_ms", "virt_kb", "res_kb", "shr_kb", "threads")
TIMING_RING_SIZE = 10_000
MODES = ("shared", "naive")
NOOP_PLUGIN = "#!/bin/sh\nexit 0\n"


@dataclass(frozen=True, slots=True)
class MemorySample:
    timestamp: float
    virt_kb: int | None
    res_kb: int | None
    shr_kb: int | None
    threads: int


@dataclass(frozen=True, slots=True)
class ScalingRow:
    n_modules: int
    mode: str
    total_ms: float

    @property
    def per_module_ms(self) -> float:
        return self.total_ms / self.n_modules if self.n_modules else 0.0


@dataclass(frozen=True, slots=True)
class PluginTiming:
    job_id: int
    plugin: str
    duration_ms: int


def _proc_threads() -> int | None:
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("Threads:"):
                    return int(line.split()[1])
    except (OSError, ValueError, IndexError):
        pass
    return None


def thread_count() -> int:
    """OS-level thread count of this process (includes non-Python threads)."""
    return _proc_threads() or threading.active_count()


def sample_self() -> MemorySample:
    """VIRT/RES/SHR (KiB) and thread count of the current process.

    Memory fields are None where the process accounting interface is missing.
    """
    virt = res = shr = None
    try:
        with open("/proc/self/statm") as fh:
            size, resident, shared = (int(x) for x in fh.read().split()[:3])
        page_kb = os.sysconf("SC_PAGE_SIZE") // 1024
        virt, res, shr = size * page_kb, resident * page_kb, shared * page_kb
    except (OSError, ValueError):
        pass
    return MemorySample(time.time(), virt, res, shr, thread_count())


class MetricsRecorder:
    def __init__(self, timing_capacity: int = TIMING_RING_SIZE) -> None:
        self._lock = threading.Lock()
        self.samples: list[MemorySample] = []
        self.scaling: list[ScalingRow] = []
        self.timings: deque[PluginTiming] = deque(maxlen=timing_capacity)
        self.peak_threads = 0

    def record_sample(self, sample: MemorySample) -> None:
        with self._lock:
            self.samples.append(sample)
            self.peak_threads = max(self.peak_threads, sample.threads)

    def sample(self) -> MemorySample:
        s = sample_self()
        self.record_sample(s)
        return s

    def record_plugin_timing(self, job_id: int, plugin: str, duration_ms: int) -> None:
        with self._lock:
            self.timings.append(PluginTiming(job_id, plugin, duration_ms))

    def record_scaling(self, rows: Iterable[ScalingRow]) -> None:
        with self._lock:
            self.scaling.extend(rows)

    def export_csv(self, path: os.PathLike | str) -> None:
        with self._lock:
            samples, rows = list(self.samples), list(self.scaling)
        export_csv(path, samples, rows)

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "samples": [[s.timestamp, s.virt_kb, s.res_kb, s.shr_kb, s.threads] for s in self.samples],
                "scaling": [[r.n_modules, r.mode, r.total_ms] for r in self.scaling],
                "peak_threads": self.peak_threads,
                "timings": len(self.timings),
            }

    @classmethod
    def from_dict(cls, data: dict) -> MetricsRecorder:
        rec = cls()
        for s in data.get("samples", []):
            rec.record_sample(MemorySample(*s))
        rec.record_scaling(ScalingRow(*r) for r in data.get("scaling", []))
        return rec


def _blank(value: object) -> str:
    return "" if value is None else str(value)


def render_csv(samples: Sequence[MemorySample], rows: Sequence[ScalingRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in samples:
        writer.writerow(["memory", f"{s.timestamp:.6f}", "", "", "", _blank(s.virt_kb),
                         _blank(s.res_kb), _blank(s.shr_kb), s.threads])
    for r in rows:
        writer.writerow(["scaling", "", r.n_modules, r.mode, f"{r.total_ms:.3f}", "", "", "", ""])
    return buf.getvalue()


def export_csv(path: os.PathLike | str, samples: Sequence[MemorySample], rows: Sequence[ScalingRow]) -> None:
    Path(path).write_text(render_csv(samples, rows))


class Ticker:
    """Samples the process every ``interval`` seconds on one daemon thread."""

    def __init__(self, recorder: MetricsRecorder, interval: float = 5.0) -> None:
        self.recorder = recorder
        self.interval = interval
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="metrics-ticker", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _run(self) -> None:
        while not self._stop.is_set():
            self.recorder.sample()
            self._stop.wait(self.interval)


# -- scaling harness ------------------------------------------------------------


_SYNTHETIC_EVENT = CommitEvent(repo="taoslite/scaling", change_id=1, source_ref="bench",
                               target_ref="main", head_sha="0" * 40, author="bench")


class ScalingHarness:
    """Runs one synthetic job per module count against a corpus of no-op plugins."""

    def __init__(self, root: os.PathLike | str | None = None) -> None:
        self._tmp = tempfile.TemporaryDirectory(prefix="taoslite-scaling-") if root is None else None
        self.root = Path(root if root is not None else self._tmp.name)
        self.plugin_path = self.root / "noop-plugin.sh"
        self.plugin_path.write_text(NOOP_PLUGIN)
        self.plugin_path.chmod(0o755)
        self.ws_root = self.root / "ws"
        self.ws_root.mkdir(exist_ok=True)
        self._ids = itertools.count(1)

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self) -> ScalingHarness:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def entries(self, n: int) -> list[PluginEntry]:
        groups = list(Group)
        return [PluginEntry(f"noop-{i:02d}", groups[i % 3], Phase.FORMAT, self.plugin_path) for i in range(n)]

    def calibrate_spawn(self, samples: int = 30) -> list[float]:
        """Wall-clock cost (ms) of single no-op plugin runs through the real runner."""
        # one fresh entry per sample so each run creates its own log file, as in a real phase
        entries = [replace(e, name=f"calib-{i:03d}") for i, e in enumerate(self.entries(1) * (samples + 1))]
        handle = workspace.allocate(self.ws_root, next(self._ids))
        try:
            ctx = compute_shared_context(_SYNTHETIC_EVENT, handle, [])
            run_plugin(entries[0], ctx)  # warm-up
            costs = []
            for entry in entries[1:]:
                t0 = time.perf_counter()
                run_plugin(entry, ctx)
                costs.append((time.perf_counter() - t0) * 1000)
            return costs
        finally:
            workspace.release(handle, JobState.SUCCEEDED, keep_failed=False)

    def run(self, n: int, mode: str, setup_ms: int, repeat: int = 1) -> ScalingRow:
        """Time one format phase of ``n`` no-op plugins; the median over ``repeat`` runs."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if repeat < 1:
            raise ValueError(f"repeat must be >= 1, got {repeat}")
        totals = [self._run_once(n, mode, setup_ms) for _ in range(repeat)]
        return ScalingRow(n, mode, statistics.median(totals))

    def _run_once(self, n: int, mode: str, setup_ms: int) -> float:
        plan = build_plan(self.entries(n))
        handle = workspace.allocate(self.ws_root, next(self._ids))
        try:
            producers = {**DEFAULT_PRODUCERS, "simulated_setup": simulated_setup(setup_ms)}
            ctx = compute_shared_context(_SYNTHETIC_EVENT, handle, [], producers=producers,
                                         naive=(mode == "naive"), lazy=True)
            t0 = time.perf_counter()
            report = run_format(plan, ctx)
            total_ms = (time.perf_counter() - t0) * 1000
            assert len(report.results) == n
            return total_ms
        finally:
            workspace.release(handle, JobState.SUCCEEDED, keep_failed=False)


def p95(values: Sequence[float]) -> float:
    if len(values) < 2:
        return float(values[0]) if values else 0.0
    return statistics.quantiles(values, n=20, method="inclusive")[-1]


def scaling_run(n_values: Iterable[int], mode: str, setup_ms: int, *, repeat: int = 1,
                harness: ScalingHarness | None = None) -> list[ScalingRow]:
    own = harness is None
    harness = harness or ScalingHarness()
    try:
        return [harness.run(n, mode, setup_ms, repeat) for n in n_values]
    finally:
        if own:
            harness.close()


def parse_range(text: str) -> list[int]:
    """``"1..12"`` -> [1..12]; also accepts ``"1,2,4"`` and a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo_i, hi_i = int(lo), int(hi)
        if hi_i < lo_i:
            raise ValueError(f"empty range {text!r}")
        return list(range(lo_i, hi_i + 1))
    return [int(x) for x in text.split(",") if x.strip()]
