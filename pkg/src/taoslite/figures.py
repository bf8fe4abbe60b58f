"""Matplotlib renderings written next to exported CSV files."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from collections.abc import Sequence

    from taoslite.metrics import MemorySample, ScalingRow

_STYLE = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def render_scaling(rows: Sequence[ScalingRow], path: Path) -> Path:
    """Total phase time against module count, one line per context mode."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for mode, marker in (("shared", "o"), ("naive", "s")):
            pts = sorted((r.n_modules, r.total_ms) for r in rows if r.mode == mode)
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=marker, label=mode)
        ax.set_xlabel("number of plug-in modules")
        ax.set_ylabel("phase time (ms)")
        ax.set_title("Execution time of plug-in modules")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def render_memory(samples: Sequence[MemorySample], path: Path) -> Path:
    """VIRT/RES/SHR over time with the thread count on a twin axis."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        if samples:
            t0 = samples[0].timestamp
            xs = [s.timestamp - t0 for s in samples]
            for attr, label in (("virt_kb", "VIRT"), ("res_kb", "RES"), ("shr_kb", "SHR")):
                ys = [getattr(s, attr) for s in samples]
                if any(y is not None for y in ys):
                    ax.plot(xs, [(y or 0) / 1024 for y in ys], label=label)
            twin = ax.twinx()
            twin.step(xs, [s.threads for s in samples], where="post", color="0.4", linestyle="--",
                      label="Threads")
            twin.set_ylabel("threads")
            twin.set_ylim(bottom=0)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("memory (MiB)")
        ax.set_title("Memory usage: VIRT, RES, SHR, and Threads")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(frameon=False, loc="upper left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def render_alongside(csv_path: Path, samples: Sequence[MemorySample], rows: Sequence[ScalingRow]) -> list[Path]:
    """Write ``<stem>-scaling.png`` / ``<stem>-memory.png`` beside ``csv_path`` for whichever data exists."""
    csv_path = Path(csv_path)
    written = []
    if rows:
        written.append(render_scaling(rows, csv_path.with_name(csv_path.stem + "-scaling.png")))
    if samples:
        written.append(render_memory(samples, csv_path.with_name(csv_path.stem + "-memory.png")))
    return written
