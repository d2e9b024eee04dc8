"""Figure rendering for CLI reports.

Every report path can drop PNG figures next to its delimited output:
benchmark bars with std whiskers, screening significance counts, and
mean-|phi| importance bars. All rendering runs on the Agg backend so it
works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_benchmark_figure(table, path, metric: str = "accuracy") -> str:
    """Bar chart of a ReportTable metric per category, std as error bars."""
    rows = [r for r in table.rows if metric in r.metrics]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if rows:
        labels = [f"{r.category}\n{r.config.get('split_fraction', '')}" for r in rows]
        means = [r.metrics[metric][0] for r in rows]
        stds = [r.metrics[metric][1] for r in rows]
        x = np.arange(len(rows))
        ax.bar(x, means, yerr=stds, capsize=4, color="#4878a8")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylim(0, 1.05)
    ax.set_ylabel(metric)
    ax.set_title(table.title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_screening_figure(report, path) -> str:
    """Horizontal bars: corrected significant test count per feature."""
    counts = {}
    for row in report.rows:
        if row.reject:
            counts[row.feature] = counts.get(row.feature, 0) + 1
    fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * max(len(counts), 1) + 1)))
    if counts:
        features = sorted(counts, key=counts.get)
        values = [counts[f] for f in features]
        ax.barh(features, values, color="#4878a8")
        ax.tick_params(axis="y", labelsize=8)
    ax.set_xlabel("significant corrected tests")
    ax.set_title(f"Feature screening at alpha={report.alpha}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_importance_figure(ranking, path, top: int = 10, title: str = "Feature importance") -> str:
    """Horizontal bars of mean |phi| for the top features, largest on top."""
    head = list(ranking[:top])[::-1]
    fig, ax = plt.subplots(figsize=(7, max(3, 0.35 * max(len(head), 1) + 1)))
    if head:
        ax.barh([f for f, _ in head], [v for _, v in head], color="#4878a8")
        ax.tick_params(axis="y", labelsize=8)
    ax.set_xlabel("mean |phi|")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
