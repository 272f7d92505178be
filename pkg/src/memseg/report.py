"""Report rendering: key=value text plus matplotlib figures.

Every report path emits both a line-oriented delimited file (easy to grep
or parse) and a PNG figure next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport


def write_keyvalues(lines: dict, path):
    with open(path, "w") as f:
        for k, v in lines.items():
            f.write(f"{k} = {v}\n")


def render_metrics_figure(report: EvalReport, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    names = ["precision", "recall", "f_score"]
    vals = [report.precision, report.recall, report.f_score]
    ax1.bar(names, vals, color=["#4878d0", "#ee854a", "#6acc64"])
    ax1.set_ylim(0, 1.05)
    ax1.set_title(f"boundary metrics (tol={report.boundary_tolerance} vox)")
    for i, v in enumerate(vals):
        ax1.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=9)
    ax2.bar(["predicted", "truth"], [report.predicted_cells, report.truth_cells],
            color=["#4878d0", "#818181"])
    ax2.set_title("cell counts")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_timings_figure(stage_times: dict, path, per_slice=None):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    stages = list(stage_times.keys())
    times = [stage_times[s] for s in stages]
    ax.barh(stages[::-1], times[::-1], color="#4878d0")
    ax.set_xlabel("wall time [s]")
    title = "per-stage timings"
    if per_slice is not None:
        title += f" ({per_slice:.3f} s/slice end to end)"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bench_figure(stage_names, per_rep_times, medians, path):
    """per_rep_times: list over reps of dicts stage -> seconds."""
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(len(stage_names))
    for rep, times in enumerate(per_rep_times):
        ax.plot(xs, [times[s] for s in stage_names], "o", alpha=0.45,
                label=f"rep {rep}" if rep < 3 else None, color="#4878d0")
    ax.plot(xs, [medians[s] for s in stage_names], "s-", color="#d65f5f", label="median")
    ax.set_xticks(xs)
    ax.set_xticklabels(stage_names, rotation=20)
    ax.set_ylabel("seconds")
    ax.set_title("benchmark: stage wall times")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
