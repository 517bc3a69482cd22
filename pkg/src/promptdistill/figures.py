"""Headless matplotlib rendering for the sweep and report outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .adapter import FewShotResult
from .metrics import METRIC_FOR_TASK, RunReport
from .taskforge import TASK_TYPES

_METHOD_STYLE = {
    "mpt": {"color": "#1f77b4", "marker": "o"},
    "pt": {"color": "#d62728", "marker": "s"},
    "lora": {"color": "#2ca02c", "marker": "^"},
}


def fewshot_figure(results: list[FewShotResult], out_path):
    """One panel per task type: metric mean +/- std against shot count k."""
    tasks = [t for t in TASK_TYPES if any(r.task_type == t for r in results)]
    fig, axes = plt.subplots(1, len(tasks), figsize=(3.2 * len(tasks), 3.0), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        for method in sorted({r.method for r in results}):
            pts = sorted((r.k, r.mean, r.std) for r in results
                         if r.task_type == task and r.method == method)
            if not pts:
                continue
            ks, means, stds = zip(*pts)
            style = _METHOD_STYLE.get(method, {})
            ax.errorbar(ks, means, yerr=stds, label=method.upper(), capsize=2, **style)
        ax.set_title(f"{task} ({METRIC_FOR_TASK[task]})", fontsize=9)
        ax.set_xlabel("k")
        ax.set_ylim(-0.05, 1.05)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("score")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def report_figure(report: RunReport, out_path):
    """Grouped bars: one group per task column plus the Avg column."""
    columns = report.task_names + ["avg"]
    methods = [row.method for row in report.rows]
    width = 0.8 / max(1, len(methods))
    fig, ax = plt.subplots(figsize=(1.6 * len(columns) + 2, 3.4))
    for mi, row in enumerate(report.rows):
        vals = [row.values.get(t) for t in report.task_names] + [row.avg]
        xs = [ci + mi * width for ci in range(len(columns))]
        heights = [v if v is not None else 0.0 for v in vals]
        ax.bar(xs, heights, width=width, label=row.method)
    ax.set_xticks([ci + 0.4 - width / 2 for ci in range(len(columns))])
    ax.set_xticklabels(columns, fontsize=8)
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
