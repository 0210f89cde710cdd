"""Report figures rendered straight to files (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (5.0, 4.0)
DPI = 120


def _finish(fig, ax, path):
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_froc(curve, path, operating_points: dict | None = None):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    fpp = [p.fp_per_patient for p in curve.points]
    tpr = [p.tpr for p in curve.points]
    ax.step(fpp, tpr, where="post", color="C0", lw=1.8)
    ax.plot(fpp, tpr, "o", color="C0", ms=3)
    for x in (0.75, 1.0):
        ax.axvline(x, color="0.6", ls="--", lw=0.8)
    if operating_points:
        text = "\n".join(f"{k}: {v:.2f}" if v is not None else f"{k}: n/a" for k, v in operating_points.items())
        ax.text(0.97, 0.03, text, transform=ax.transAxes, ha="right", va="bottom", fontsize=8)
    ax.set_xlabel("False positives per patient")
    ax.set_ylabel("Lesion-level TPR")
    ax.set_ylim(0, 1.02)
    ax.set_xlim(left=0)
    return _finish(fig, ax, path)


def roc_points(scores, labels):
    """Empirical ROC vertices (fpr, tpr), one per distinct score."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    thr = np.unique(s)[::-1]
    fpr = [0.0] + [float((s[~y] >= t).mean()) for t in thr]
    tpr = [0.0] + [float((s[y] >= t).mean()) for t in thr]
    return np.array(fpr), np.array(tpr)


def plot_roc(scores, labels, path, auc=None, ci=None):
    fpr, tpr = roc_points(scores, labels)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    label = None
    if auc is not None:
        label = f"AUC {auc:.3f}" + (f" [{ci[0]:.3f}, {ci[1]:.3f}]" if ci else "")
    ax.plot(fpr, tpr, color="C1", lw=1.8, label=label)
    ax.plot([0, 1], [0, 1], color="0.6", ls=":", lw=0.8)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("Sensitivity")
    ax.set_aspect("equal")
    if label:
        ax.legend(loc="lower right", frameon=False)
    return _finish(fig, ax, path)


def plot_bootstrap(dist, path, ci=None):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.hist(np.asarray(dist), bins=40, color="C2", alpha=0.8)
    if ci is not None:
        for v in ci:
            ax.axvline(v, color="k", ls="--", lw=0.9)
    ax.set_xlabel("Bootstrap AUC")
    ax.set_ylabel("Resamples")
    return _finish(fig, ax, path)
