"""Report figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (np.sqrt(5) - 1.0) / 2.0
fig_width = 4.8

params = {
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "figure.figsize": (fig_width, fig_width * golden),
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "axes.prop_cycle": matplotlib.cycler(color=["#08589e", "#e34a33", "#4eb3d3", "#7f7f7f"]),
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_score_curve(curve, path, T: int | None = None) -> Path:
    """Natural-prompt probability of raw and reference images against forward step."""
    with plt.rc_context(params):
        fig, (ax, ax2) = plt.subplots(2, 1, sharex=True, figsize=(fig_width, fig_width * 0.8))
        ax.plot(curve.t, curve.score_ref, label="reference")
        ax.plot(curve.t, curve.score_raw, label="raw")
        ax.set_ylabel("natural probability")
        ax.legend(loc="best")
        ax2.plot(curve.t, curve.diff, color="#7f7f7f")
        ax2.axhline(0.0, color="k", lw=0.5)
        ax2.set_ylabel("raw - reference")
        ax2.set_xlabel("diffusion step t")
        if T is not None:
            ax2.set_xlim(0, T)
        return _save(fig, path)


def plot_loss(steps, losses, path, smooth: int = 50, label: str = "training loss") -> Path:
    steps, losses = np.asarray(steps), np.asarray(losses, dtype=float)
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, alpha=0.3, lw=0.6, label=label)
        if smooth > 1 and losses.size >= smooth:
            k = np.ones(smooth) / smooth
            ax.plot(steps[smooth - 1 :], np.convolve(losses, k, mode="valid"), label=f"{smooth}-step mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(loc="best")
        return _save(fig, path)


def plot_metrics(report, path) -> Path:
    """One small panel per metric column showing per-image values and the mean."""
    cols = [c for c, m in report.means.items() if m is not None]
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, max(len(cols), 1), figsize=(1.3 * max(len(cols), 1) + 0.6, 2.2), squeeze=False)
        for ax, col in zip(axes[0], cols):
            vals = np.array([r[col] for r in report.records if r.get(col) is not None])
            jitter = np.random.default_rng(0).uniform(-0.15, 0.15, vals.size)
            ax.scatter(jitter, vals, s=6, alpha=0.6)
            ax.axhline(report.means[col], color="#e34a33", lw=1.0)
            ax.set_xticks([])
            ax.set_xlim(-0.5, 0.5)
            ax.set_title(col)
        if not cols:
            axes[0][0].set_axis_off()
        fig.tight_layout()
        return _save(fig, path)
