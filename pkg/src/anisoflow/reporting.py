"""Figure rendering for run outputs.

Uses the file-only matplotlib backend so runs never require a display.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_series_figures(series, outdir):
    """Render the volume-drift and normalized-energy figures for a run.

    Parameters
    ----------
    series : sequence
        Evolution rows (step, t, V, dV_rel, W, W_rel, newton, quality).
    outdir : path-like
        Directory the PNG files are written into.

    Returns
    -------
    list of Path
        The written figure paths.
    """
    rows = np.asarray(series, dtype=float)
    t = rows[:, 1]
    outdir = Path(outdir)
    written = []

    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(t, rows[:, 3], lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("relative volume change")
    ax.ticklabel_format(axis="y", style="sci", scilimits=(0, 0))
    fig.tight_layout()
    path = outdir / "volume_drift.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(t, rows[:, 5], lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("W(t) / W(0)")
    fig.tight_layout()
    path = outdir / "energy_ratio.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written


def save_convergence_figure(report, outdir):
    """Render the log-log error-versus-h figure for a convergence report.

    Returns the written path, or None when the report has no rows.
    """
    if not report.rows:
        return None
    h = np.array([row[0] for row in report.rows])
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    for which, time in enumerate(report.times):
        e = np.array([row[2][which] for row in report.rows])
        ax.loglog(h, e, "o-", label=f"t = {time:g}")
    guide = report.rows[0][2][0] * (h / h[0]) ** 2
    ax.loglog(h, guide, "k--", lw=0.8, label="order 2")
    ax.set_xlabel("h")
    ax.set_ylabel("symmetric-difference volume")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(outdir) / f"convergence_case{report.case}.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
