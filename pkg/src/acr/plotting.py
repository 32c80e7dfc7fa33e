"""Static figures rendered next to the CSV exports.

Uses the Agg backend and strips the PNG software tag so repeated runs
write identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = dict(dpi=100, metadata={"Software": None})


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)
    return path


def plot_risk_coverage(curves, path: str, label: str = None) -> str:
    """``curves`` is one RiskCoverageCurve or a mapping label -> curve."""
    if not isinstance(curves, dict):
        curves = {label or "model": curves}
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, rc in curves.items():
        ax.plot(rc.coverage, rc.risk, label=name, lw=1.5)
    ax.set_xlabel("coverage")
    ax.set_ylabel("selective risk")
    ax.set_xlim(0, 1)
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    ax.legend(loc="upper left")
    return _finish(fig, path)


def plot_score_histogram(rows, path: str) -> str:
    """Bars from (bin_left, bin_right, count_correct, count_incorrect) rows, as densities."""
    rows = np.asarray(rows, dtype=np.float64)
    left, right, cc, ci = rows.T
    width = right - left
    fig, ax = plt.subplots(figsize=(5, 4))
    for counts, name, color in ((cc, "correct", "tab:blue"), (ci, "incorrect", "tab:red")):
        total = counts.sum()
        dens = counts / (total * width) if total else counts
        ax.bar(left, dens, width=width, align="edge", alpha=0.55, color=color, label=f"{name} (n={int(total)})")
    ax.set_xlabel("confidence")
    ax.set_ylabel("density")
    ax.set_xlim(0, 1)
    ax.legend(loc="upper left")
    return _finish(fig, path)


def plot_history(history, path: str) -> str:
    epochs = [h["epoch"] for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("loss_total", "loss_cls", "loss_outlier", "loss_acl"):
        a1.plot(epochs, [h[key] for h in history], label=key)
    a1.set_xlabel("epoch")
    a1.set_ylabel("training loss")
    a1.legend()
    a2.plot(epochs, [h["val_acc"] for h in history], label="val_acc")
    a2.plot(epochs, [np.nan if h["val_auroc"] is None else h["val_auroc"] for h in history], label="val_auroc")
    a2.set_xlabel("epoch")
    a2.legend()
    return _finish(fig, path)


def plot_sweep(summary, metric: str, path: str) -> str:
    """Bar chart of per-arm mean with std error bars. ``summary`` maps arm -> (mean, std)."""
    arms = list(summary)
    means = [np.nan if summary[a][0] is None else summary[a][0] for a in arms]
    stds = [0.0 if summary[a][1] is None else summary[a][1] for a in arms]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(arms)), 3.5))
    ax.bar(range(len(arms)), means, yerr=stds, capsize=4, color="tab:gray")
    ax.set_xticks(range(len(arms)))
    ax.set_xticklabels(arms, rotation=20, ha="right")
    ax.set_ylabel(metric)
    finite = [m for m in means if np.isfinite(m)]
    if finite:
        lo, hi = min(finite), max(finite)
        pad = max(hi - lo, 1e-3)
        ax.set_ylim(lo - 2 * pad, hi + 2 * pad)
    return _finish(fig, path)
