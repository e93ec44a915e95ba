"""PNG figures written next to the tab-separated reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps or version strings, so identical inputs give identical files
_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
})


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
    return path


def stage_curve(rows: Sequence[tuple[int, float, float]], stage: int, path) -> Path:
    """Training loss and validation mean F1 per epoch."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    epochs = [r[0] for r in rows]
    ax.plot(epochs, [r[1] for r in rows], "o-", color="tab:red", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r[2] for r in rows], "s-", color="tab:blue", label="val mean F1")
    ax2.set_ylabel("mean F1")
    ax2.set_ylim(0, 1)
    ax.set_title(f"stage {stage}")
    handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], loc="center right", frameon=False)
    return _save(fig, path)


def class_stats(rows, path) -> Path:
    """Segment counts and average sizes per class."""
    rows = [r for r in rows if r.class_id != 0]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    names = [r.name for r in rows]
    a.bar(names, [r.count for r in rows], color="tab:gray")
    a.set_ylabel("segments")
    b.bar(names, [r.avg_size for r in rows], color="tab:green")
    b.set_ylabel("average size (px)")
    for ax in (a, b):
        ax.tick_params(axis="x", labelrotation=90)
    return _save(fig, path)


def f1_histogram(scores: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(list(scores), bins=20, range=(0, 1), color="tab:blue", edgecolor="white")
    ax.set_xlabel("per-image F1")
    ax.set_ylabel("images")
    return _save(fig, path)


def search_log(result, path) -> Path:
    """Mean F1 of every evaluated member subset, best one highlighted."""
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(result.log)), 3))
    labels = [result.bitmask(s) for s, _ in result.log]
    colors = ["tab:orange" if s == result.best_subset else "tab:gray" for s, _ in result.log]
    ax.bar(range(len(labels)), [f for _, f in result.log], color=colors)
    ax.set_xticks(range(len(labels)), labels, rotation=90, family="monospace")
    ax.set_ylabel("mean F1")
    return _save(fig, path)
