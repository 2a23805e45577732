"""Raster figures (PNG via matplotlib) to accompany the SVG and CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalviz import dot_color  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "svg.hashsalt": "gazekit",
}
# no creation date or version strings, so reruns produce identical files
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_scatter(scene, path):
    """Truth '+', coloured predictions, tri-down centroids and the camera star."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 5.5))
        colors = [dot_color(d) for d in scene.dot_ids]
        if scene.corrected is not None:
            for p, q, c in zip(scene.preds, scene.corrected, colors):
                ax.plot([p[0], q[0]], [p[1], q[1]], color=c, lw=0.6, alpha=0.6)
        ax.scatter(scene.preds[:, 0], scene.preds[:, 1], s=8, c=colors, label="prediction")
        for d, t, cen in scene.dots():
            ax.plot(t[0], t[1], "+", color=dot_color(d), ms=10, mew=2)
            ax.plot(cen[0], cen[1], "v", color=dot_color(d), ms=7, mfc="none")
        ax.plot(0.0, 0.0, "*", color="black", ms=12, label="camera")
        ax.set_xlabel("x (cm from camera)")
        ax.set_ylabel("y (cm from camera)")
        ax.invert_yaxis()   # y grows downward on the device
        ax.set_aspect("equal", adjustable="datalim")
        if scene.title:
            ax.set_title(scene.title)
        return _save(fig, path)


def plot_personalization(summary, path, variant=None):
    """Per-user MED before and after the correction as paired bars."""
    variant = variant or summary.variants[0]
    rs = [r for r in summary.reports if r.variant == variant]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(rs) + 1.5), 3.0))
        x = np.arange(len(rs))
        ax.bar(x - 0.2, [r.med_before for r in rs], 0.4, label="base", color="0.6")
        ax.bar(x + 0.2, [r.med_after for r in rs], 0.4, label=summary.method, color="#1f77b4")
        ax.set_xticks(x, [r.user_id for r in rs], rotation=45, ha="right")
        ax.set_ylabel("MED (cm)")
        ax.set_title(f"{summary.method} / {variant} (seed {summary.seed})")
        ax.legend()
        return _save(fig, path)


def plot_training(history, path):
    """Training loss and validation MED against step."""
    steps = [h["step"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(steps, [h["train_loss"] for h in history], lw=0.8, color="0.5", label="train loss")
        val = [(h["step"], h["val_med"]) for h in history if h.get("val_med") is not None]
        if val:
            ax.plot(*zip(*val), "o-", ms=3, color="#d62728", label="val MED (cm)")
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)
