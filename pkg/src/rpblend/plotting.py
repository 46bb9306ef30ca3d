"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REPORT_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def new_figure(width=5.0, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return plt.subplots(figsize=(width, height or width * golden))


def plot_ratio_histogram(edges, counts, path, title="Foreground ratio distribution") -> Path:
    path = Path(path)
    with plt.rc_context(REPORT_STYLE):
        fig, ax = new_figure()
        widths = np.diff(edges)
        ax.bar(edges[:-1], counts, width=widths, align="edge", color="#4c72b0", edgecolor="white")
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("foreground ratio")
        ax.set_ylabel("images")
        ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_metric_summary(names, psnr, fmse, path) -> Path:
    """Per-image PSNR and fMSE side by side, in file order."""
    path = Path(path)
    with plt.rc_context(REPORT_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        xs = np.arange(len(names))
        ax1.plot(xs, psnr, "o-", ms=3, color="#4c72b0")
        ax1.set_ylabel("PSNR (dB)")
        ax2.plot(xs, fmse, "o-", ms=3, color="#dd8452")
        ax2.set_ylabel("fMSE")
        for ax in (ax1, ax2):
            ax.set_xlabel("image")
            if len(names) <= 20:
                ax.set_xticks(xs)
                ax.set_xticklabels(names, rotation=60, ha="right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
