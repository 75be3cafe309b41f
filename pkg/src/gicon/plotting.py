"""Matplotlib rendering for evaluation reports."""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
    # fixed ids and no timestamp keep the SVG byte-stable
    "svg.hashsalt": "gicon",
}


def rmse_figure(report, noise: bool = False):
    """One line per (dt, channel): RMSE against the number of context examples."""
    series = defaultdict(list)
    for r in report.rows:
        y = r.rmse_noise if noise else r.rmse
        if not math.isnan(y):
            series[(r.dt, r.channel)].append((r.example_count, y))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (dt, ch), pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"dt={dt}h {ch}")
        counts = sorted({r.example_count for r in report.rows})
        if counts and counts[-1] > 10:
            ax.set_xscale("symlog", linthresh=1)
        ax.set_xlabel("context examples")
        ax.set_ylabel("RMSE (noise contexts)" if noise else "RMSE")
        if series:
            ax.legend(loc="best")
        fig.tight_layout()
    return fig


def save_rmse_chart(report, path, noise: bool = False) -> None:
    fig = rmse_figure(report, noise)
    with plt.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
