"""Static report figures (SVG/PNG via the Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
COLORS = {"base": "#8c8c8c", "adv": "#1f5fa8"}

report_rc = {
    "font.family": "sans-serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "axes.grid.axis": "y",
    "grid.linewidth": 0.4,
    "grid.alpha": 0.6,
    "svg.fonttype": "none",
    "svg.hashsalt": "kspace",  # stable element ids, so reruns give identical files
}


def figsize(width_in: float = 6.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width_in, width_in * ratio


def regime_bar_chart(summary: list[dict], path, variants=("base", "adv"), title: str | None = None) -> Path:
    """Grouped bars: mean AUROC per regime, one bar per variant.

    ``summary`` rows carry ``regime`` plus one key per variant (NaN = missing).
    """
    path = Path(path)
    regimes = []
    for row in summary:
        if row["regime"] not in regimes and row.get("task") != "average":
            regimes.append(row["regime"])
    with plt.rc_context(report_rc):
        fig, ax = plt.subplots(figsize=figsize())
        x = np.arange(len(regimes))
        w = 0.8 / max(len(variants), 1)
        for i, v in enumerate(variants):
            means = []
            for r in regimes:
                vals = np.array([row.get(v, np.nan) for row in summary
                                 if row["regime"] == r and row.get("task") != "average"], dtype=float)
                vals = vals[~np.isnan(vals)]
                means.append(vals.mean() if len(vals) else np.nan)
            ax.bar(x + (i - (len(variants) - 1) / 2) * w, means, w, label=v,
                   color=COLORS.get(v, None), edgecolor="black", linewidth=0.4)
        ax.axhline(0.5, color="black", linewidth=0.6, linestyle=":")
        ax.set_xticks(x)
        ax.set_xticklabels(regimes)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("AUROC")
        if title:
            ax.set_title(title)
        if len(regimes):
            ax.legend(frameon=False, loc="upper right")
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
        plt.close(fig)
    return path
