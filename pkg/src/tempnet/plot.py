"""Deterministic SVG figures.

Matplotlib is pinned to the Agg backend, text stays as SVG text, the
element-id salt is fixed and the date stamp is dropped, so identical inputs
give identical bytes.
"""

from __future__ import annotations

import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "tempnet",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "path.simplify": False,
}


def _render(draw) -> str:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        try:
            draw(fig, ax)
            buf = io.StringIO()
            fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        finally:
            plt.close(fig)
    return buf.getvalue()


def raster_svg(rows: Sequence[tuple], title: str = "spike raster") -> str:
    """Rows ``(sample, layer, neuron, polarity, time)``; one colour per polarity."""
    def draw(fig, ax):
        for pol, colour, name in ((0, "tab:red", "plus"), (1, "tab:blue", "minus")):
            pts = [(r[4], r[2] + 0.5 * r[3]) for r in rows if r[3] == pol]
            if pts:
                t, n = zip(*pts)
                ax.scatter(t, n, s=4, c=colour, label=name, linewidths=0)
        ax.set_xlabel("time")
        ax.set_ylabel("neuron")
        ax.set_title(title)
        if rows:
            ax.legend(loc="upper right")
    return _render(draw)


def sweep_svg(gamma, latency, accuracy, title: str = "gamma sweep") -> str:
    def draw(fig, ax):
        ax.plot(gamma, latency, "o-", color="tab:blue")
        ax.set_xlabel("gamma")
        ax.set_ylabel("latency", color="tab:blue")
        ax2 = ax.twinx()
        ax2.plot(gamma, accuracy, "s--", color="tab:red")
        ax2.set_ylabel("accuracy", color="tab:red")
        ax.set_title(title)
    return _render(draw)


def curves_svg(x, series: dict[str, Sequence[float]], xlabel: str, ylabel: str, title: str = "",
               marks: dict[str, Sequence[float]] | None = None) -> str:
    def draw(fig, ax):
        for name, y in series.items():
            ax.plot(x, y, label=name, linewidth=1)
        for name, t in (marks or {}).items():
            if len(t):
                ax.plot(t, np.zeros(len(t)), "k.", markersize=4)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if series:
            ax.legend(loc="upper right", fontsize="small")
    return _render(draw)


def matrix_svg(m: np.ndarray, title: str = "") -> str:
    def draw(fig, ax):
        if m.size:
            im = ax.imshow(m, cmap="viridis", interpolation="nearest")
            fig.colorbar(im, ax=ax)
        ax.set_title(title)
    return _render(draw)


def bars_svg(labels: Sequence[str], values: Sequence[float], ylabel: str, title: str = "") -> str:
    def draw(fig, ax):
        ax.bar(range(len(values)), values, color="tab:gray")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=90, fontsize="x-small")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
    return _render(draw)
