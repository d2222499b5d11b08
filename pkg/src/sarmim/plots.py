"""Static PNG report figures (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# keep files stable across reruns
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def line_plot(path, x, series: dict, xlabel, ylabel, title=None, logx=False):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def bar_plot(path, labels, values, ylabel, errors=None, title=None):
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(labels) + 2), 3.5))
    ax.bar(range(len(values)), values, yerr=errors, capsize=3)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels([str(l) for l in labels], rotation=45 if len(labels) > 6 else 0, ha="right"
                       if len(labels) > 6 else "center")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def head_scatter(path, distances, title=None):
    """Attention distance per head, one column of points per layer."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for layer, row in enumerate(distances):
        ax.scatter([layer + 1] * len(row), row, s=18)
    ax.set_xlabel("layer")
    ax.set_ylabel("mean attention distance (px)")
    ax.set_xticks(range(1, len(distances) + 1))
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)
