"""Bar charts of per-rotation, mean and worst-case metrics."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BAR_KWARGS = dict(edgecolor="black", linewidth=0.5)
WORST_KWARGS = dict(marker="v", color="black", linestyle="none", markersize=5, label="worst")
GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.5, alpha=0.3)


def plot_metric_bars(results: Sequence, metric: str, path: str | Path, dpi: int = 120) -> Path:
    """One group of bars per method (per test domain plus mean), worst case marked."""
    key = {"acc": "accuracy", "f1": "macro_f1"}[metric]
    path = Path(path)
    methods = [r.method for r in results]
    domains = [d for d, _ in results[0].per_rotation]
    n_bars = len(domains) + 1
    width = 0.8 / n_bars
    x = np.arange(len(methods))

    fig, ax = plt.subplots(figsize=(max(6.0, 1.3 * len(methods)), 3.6))
    cmap = plt.get_cmap("viridis")
    for j, dom in enumerate(domains):
        vals = [100 * getattr(dict(r.per_rotation)[dom], key) for r in results]
        ax.bar(x + (j - n_bars / 2 + 0.5) * width, vals, width, color=cmap(j / max(1, len(domains))),
               label=f"test domain {dom}", **BAR_KWARGS)
    means = [100 * np.mean([getattr(m, key) for _, m in r.per_rotation]) for r in results]
    worst = [100 * min(getattr(m, key) for _, m in r.per_rotation) for r in results]
    ax.bar(x + (n_bars / 2 - 0.5) * width, means, width, color="lightgray", hatch="//", label="mean", **BAR_KWARGS)
    ax.plot(x + (n_bars / 2 - 0.5) * width, worst, **WORST_KWARGS)

    lo = min(min(worst), min(means))
    ax.set_ylim(max(0.0, lo - 10.0), 100.5)
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel({"acc": "Accuracy (%)", "f1": "Macro-F1 (%)"}[metric])
    ax.grid(axis="y", **GRID_KWARGS)
    ax.set_axisbelow(True)
    ax.legend(fontsize=7, ncol=min(4, n_bars + 1), loc="lower left")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return path
