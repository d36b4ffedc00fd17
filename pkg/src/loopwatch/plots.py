"""PNG figures: deviation traces with flags and triggers, energy curves, dissimilarity profiles."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _shade(ax, labels):
    if labels is None:
        return
    edges = np.diff(np.concatenate([[0], np.asarray(labels, dtype=int), [0]]))
    for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
        ax.axvspan(a - 0.5, b - 0.5, color="orange", alpha=0.2, lw=0)


def plot_report(report, out_dir, labels=None, taus=None) -> list[Path]:
    """One PNG per monitor: deviation over time, flagged frames, trigger signal."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, name in enumerate(("cfam", "sfam")):
        dev = getattr(report, f"{name}_dev")
        flags = getattr(report, f"{name}_flag")
        trig = getattr(report, f"{name}_trigger")
        fig, (ax, ax2) = plt.subplots(2, 1, figsize=(9, 4.5), sharex=True,
                                      gridspec_kw={"height_ratios": [3, 1]})
        _shade(ax, labels)
        ax.plot(report.t, dev, lw=1, color="tab:blue", label="deviation")
        ax.plot(report.t[flags], dev[flags], "o", ms=3, color="red", label="flag")
        if taus is not None:
            ax.axhline(taus[i], ls="--", color="gray", lw=1, label="threshold")
        ax.set_ylabel("|u - best action|")
        ax.set_title(f"{name.upper()} deviation")
        ax.legend(loc="upper right", fontsize=8)
        _shade(ax2, labels)
        ax2.step(report.t, trig.astype(int), where="mid", color="black")
        ax2.set_ylim(-0.1, 1.1)
        ax2.set_ylabel("trigger")
        ax2.set_xlabel("frame")
        fig.tight_layout()
        path = out_dir / f"{name}_deviation.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_profile(grid, values, path, u_actual=None, ylabel="energy", title=None) -> Path:
    """Energy curve or dissimilarity profile over the action grid."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(grid.values, values, "o-", ms=3)
    best = grid.values[int(np.argmin(values))]
    ax.axvline(best, color="green", ls="--", lw=1, label="best action")
    if u_actual is not None:
        ax.axvline(u_actual, color="red", lw=1, label="actual command")
    ax.set_xlabel("steering command")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
