"""Figure rendering for the reporting paths.

Every figure is written next to its delimited text/JSON counterpart; the
core library never depends on this module, and the Agg backend keeps it
headless-safe.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def scatter_figure(ages, preds, path, title: str = "Estimated vs chronological age") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    lo = min(min(ages), min(preds))
    hi = max(max(ages), max(preds))
    pad = 0.05 * (hi - lo + 1e-9)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="tab:blue",
            lw=1.0, label="ideal y = x")
    ax.scatter(ages, preds, s=14, alpha=0.7, color="tab:red", edgecolors="none")
    ax.set_xlabel("chronological age (years)")
    ax.set_ylabel("estimated age (years)")
    ax.set_title(title)
    ax.legend(loc="upper left", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def training_curve_figure(train_losses, val_maes, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = range(1, len(train_losses) + 1)
    ax.plot(epochs, train_losses, label="train loss (L1)", color="tab:blue")
    ax.plot(epochs, val_maes, label="validation MAE", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("years")
    ax.set_title("Training progress")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def ablation_figure(rows: list[dict], path) -> Path:
    """Bar chart of test MAE per configuration row."""
    path = Path(path)
    names = [r["name"] for r in rows]
    maes = [r["mae"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(rows)), maes, color="tab:purple", alpha=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("test MAE (years)")
    ax.set_title("Configuration sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
