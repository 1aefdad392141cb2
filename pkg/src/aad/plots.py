"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import method_label, roc_curve  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_roc(curves, path, title: str = "") -> Path:
    """``curves``: iterable of (label, scores, labels, auc)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, scores, labels, value in curves:
        fpr, tpr = roc_curve(scores, labels)
        ax.plot(fpr, tpr, label=f"{name} (AUC {value:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_title(title, fontsize=9)
    ax.legend(loc="lower right", fontsize=7)
    return _save(fig, path)


def plot_score_hist(scores, labels, path, title: str = "") -> Path:
    s = np.asarray(scores, dtype=float)
    pos = np.asarray([lab == "anomalous" if isinstance(lab, str) else bool(lab) for lab in labels])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bins = np.histogram_bin_edges(s, bins=30)
    ax.hist(s[~pos], bins=bins, alpha=0.6, label="normal")
    ax.hist(s[pos], bins=bins, alpha=0.6, label="anomalous")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("clips")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_losses(log, path, title: str = "") -> Path:
    """Train and validation loss per epoch; the restored epoch is marked."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [r[0] for r in log.rows]
    ax.plot(epochs, [r[1] for r in log.rows], label="train")
    ax.plot(epochs, [r[2] for r in log.rows], label="validation")
    if log.best_epoch:
        ax.axvline(log.best_epoch, color="0.5", ls=":", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_auc_summary(report, path) -> Path:
    """Grouped bars of all-machines mean AUC per SNR and method."""
    snrs, methods = report.snrs(), report.methods()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(snrs))
    for j, (kind, dim) in enumerate(methods):
        vals = [report.all_machines.get((s, kind, dim), np.nan) for s in snrs]
        ax.bar(x + j * width, vals, width, label=method_label(kind, dim))
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(snrs)
    ax.set_ylim(0.4, 1.0)
    ax.set_ylabel("mean AUC over machines")
    ax.legend(fontsize=7)
    return _save(fig, path)
