"""Report figures. Rendering is file-only (Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_detection_rates(table, path) -> Path:
    """Grouped bars: one panel per contamination, malware datasets on x, one bar per variant."""
    malware = [d for d in table.datasets if any(r.dataset == d and r.role == "malware" for r in table.rows)]
    cs = table.contaminations
    variants = table.variants
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(cs), figsize=(3.2 * len(cs), 2.8), sharey=True, squeeze=False)
        x = np.arange(max(len(malware), 1))
        width = 0.8 / len(variants)
        for ax, c in zip(axes[0], cs):
            for k, v in enumerate(variants):
                vals = [table.cell(d, c, v) for d in malware]
                ax.bar(x[: len(vals)] + (k - (len(variants) - 1) / 2) * width, vals, width, label=v)
            ax.set_xticks(x[: len(malware)])
            ax.set_xticklabels(malware, rotation=30, ha="right")
            ax.set_title(f"contamination {c:g}")
            ax.set_ylim(0, 105)
        axes[0][0].set_ylabel("detection rate (%)")
        axes[0][-1].legend(frameon=False)
        return _save(fig, path)


def plot_score_distributions(table, path) -> Path:
    """Histogram of window anomaly scores per variant, benign eval vs malware."""
    variants = list(table.scores)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(variants), 1), figsize=(3.2 * max(len(variants), 1), 2.6),
                                 sharey=True, squeeze=False)
        for ax, v in zip(axes[0], variants):
            per = table.scores[v]
            benign = [s for k, s in per.items() if k.startswith("benign")]
            other = [s for k, s in per.items() if not k.startswith("benign")]
            bins = np.linspace(0.3, 0.8, 41)
            if benign:
                ax.hist(np.concatenate(benign), bins=bins, alpha=0.6, density=True, label="benign")
            if other:
                ax.hist(np.concatenate(other), bins=bins, alpha=0.6, density=True, label="malware")
            ax.set_title(v)
            ax.set_xlabel("anomaly score")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)


def plot_stream(smoothed: Sequence[float], raw: Sequence[float], threshold: float, path,
                injection_window=None) -> Path:
    """Raw and EMA-smoothed window scores of one stream against its threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.4))
        ax.plot(raw, lw=0.6, color="0.6", label="raw")
        ax.plot(smoothed, lw=1.2, label="smoothed")
        ax.axhline(threshold, color="C3", lw=0.8, ls="--", label="threshold")
        if injection_window is not None:
            ax.axvline(injection_window, color="k", lw=0.8, ls=":")
        ax.set_xlabel("window")
        ax.set_ylabel("score")
        ax.legend(frameon=False, ncol=3)
        return _save(fig, path)
