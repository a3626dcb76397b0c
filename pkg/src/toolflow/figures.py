"""Matplotlib rendering for toolset statistics reports.

The stats report path writes two histogram figures next to the delimited
records: functions-per-question (composability) and function occurrence
(generalization across questions).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .toolset import StatsReport


def _bar(ax, histogram: dict[int, int], xlabel: str, color: str) -> None:
    if histogram:
        keys = sorted(histogram)
        ax.bar(keys, [histogram[k] for k in keys], color=color, edgecolor="black")
        ax.set_xticks(keys)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")


def render_stats_figures(report: StatsReport, out_dir: str | Path) -> list[Path]:
    """Write FPQ and occurrence histograms as PNGs; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    _bar(ax, report.fpq_histogram, "positive functions per question", "#4878cf")
    ax.set_title(f"FPQ histogram ({report.label})")
    fig.tight_layout()
    path = out / f"fpq_histogram_{report.label}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    _bar(ax, report.occurrence_histogram, "questions linked per function", "#6acc65")
    ax.set_title(f"Function occurrence histogram ({report.label})")
    fig.tight_layout()
    path = out / f"occurrence_histogram_{report.label}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
