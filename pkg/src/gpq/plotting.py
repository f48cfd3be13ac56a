"""Figures written next to the CSV reports."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["figure.autolayout"] = True
plt.rcParams["font.size"] = 10.0
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3


def _save(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_selection_frequency(counts: Sequence[tuple[int, int]], path, title: str = "Selection frequency"):
    values = [c for _, c in counts]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.bar(np.arange(len(values)), values, width=1.0, color="tab:blue")
    ax.set_xlabel("query (sorted by count)")
    ax.set_ylabel("times selected")
    ax.set_title(title)
    return _save(fig, path)


def plot_reference_points(panels: Sequence[tuple[str, np.ndarray, np.ndarray]], path):
    """One scatter per ``(title, points (N, 2), alive flags)`` panel."""
    fig, axes = plt.subplots(1, len(panels), figsize=(3.6 * len(panels), 3.6), squeeze=False)
    for ax, (title, pts, alive) in zip(axes[0], panels):
        alive = np.asarray(alive, dtype=bool)
        ax.scatter(pts[~alive, 0], pts[~alive, 1], s=10, c="lightgray", label="pruned")
        ax.scatter(pts[alive, 0], pts[alive, 1], s=14, c="tab:red", label="alive")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_aspect("equal")
        ax.set_title(title)
        if (~alive).any():
            ax.legend(loc="upper right", fontsize=7)
    return _save(fig, path)


def plot_prune_trace(events, initial: int, total_iterations: int | None, path):
    """Alive query count against iteration, from a prune report's events."""
    ts, counts = [0], [initial]
    n = initial
    for e in sorted(events, key=lambda e: e.iteration):
        ts.append(e.iteration)
        counts.append(n)
        n -= len(e.removed)
        ts.append(e.iteration)
        counts.append(n)
    if total_iterations:
        ts.append(total_iterations)
        counts.append(n)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(ts, counts, color="tab:green")
    ax.set_xlabel("iteration")
    ax.set_ylabel("alive queries")
    return _save(fig, path)


def plot_latency(nqs: Sequence[int], stats, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    med = [s.median_ms for s in stats]
    p90 = [s.p90_ms for s in stats]
    ax.plot(nqs, med, "o-", label="median")
    ax.plot(nqs, p90, "s--", label="p90")
    ax.set_xlabel("queries")
    ax.set_ylabel("forward time (ms)")
    ax.legend()
    return _save(fig, path)


def plot_flops(reports, path):
    """Stacked per-submodule GFLOPs, one bar per report."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [str(r.config.num_queries) for r in reports]
    bottom = np.zeros(len(reports))
    for part in reports[0].parts:
        vals = np.array([r.parts[part] for r in reports]) / 1e9
        ax.bar(labels, vals, bottom=bottom, label=part)
        bottom += vals
    ax.set_xlabel("queries")
    ax.set_ylabel("GFLOPs")
    ax.legend(fontsize=7)
    return _save(fig, path)
