"""Report figures: grouped bars for ROUGE-L / language accuracy and probe accuracy."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GROUP_LABELS = {"seen-intra": "seen (intra)", "seen-cross": "seen (cross)", "unseen": "unseen"}


def _grouped_bars(ax, methods: Sequence[str], groups: Sequence[str], values: dict[tuple[str, str], float]) -> None:
    width = 0.8 / max(1, len(groups))
    x = np.arange(len(methods))
    for j, g in enumerate(groups):
        ys = [values.get((m, g), np.nan) for m in methods]
        ax.bar(x + (j - (len(groups) - 1) / 2) * width, ys, width, label=GROUP_LABELS.get(g, g))
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)


def plot_summary(summary: Sequence[dict], path: str | Path) -> Path:
    """Two panels (ROUGE-L, language accuracy), methods on x, direction groups as bars."""
    methods = list(dict.fromkeys(r["method"] for r in summary))
    groups = [g for g in GROUP_LABELS if any(r["group"] == g for r in summary)]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    for ax, metric, title in zip(axes, ("rougeL", "lang_acc"), ("ROUGE-L F1", "correct-language rate")):
        _grouped_bars(ax, methods, groups, {(r["method"], r["group"]): r[metric] for r in summary})
        ax.set_title(title)
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_probe(probe_rows: Sequence[dict], path: str | Path) -> Path:
    """Mean probe accuracy per method with per-seed dots and the chance line."""
    methods = list(dict.fromkeys(r["method"] for r in probe_rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, m in enumerate(methods):
        accs = [r["accuracy"] for r in probe_rows if r["method"] == m]
        ax.bar(i, np.mean(accs), 0.6, color="0.75")
        ax.plot([i] * len(accs), accs, "k.", ms=6)
    if probe_rows:
        ax.axhline(probe_rows[0]["chance"], ls="--", color="C3", lw=1, label="chance")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("probe accuracy")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
