"""Figure rendering for training logs, evaluation reports and sweeps.

Everything renders headless to PNG files next to the delimited outputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = [
    "save_training_curves",
    "save_rate_band",
    "save_accuracy_curve",
    "save_selection_histogram",
    "save_ablation_chart",
]


def save_training_curves(rows, path) -> str:
    """Loss curves over iterations; rows are training-log dicts."""
    iterations = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iterations, [r["train_loss"] for r in rows], label="train loss")
    val = [(r["iteration"], r["val_loss"]) for r in rows if r["val_loss"] is not None]
    if val:
        ax.plot([v[0] for v in val], [v[1] for v in val], label="val loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(iterations, [r["lr"] for r in rows], color="gray", alpha=0.4, label="base rate")
    ax2.set_ylabel("base rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def save_rate_band(rows, path) -> str:
    """Min/mean/max expert rate over iterations."""
    kept = [r for r in rows if r["rate_mean"] is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    if kept:
        iterations = [r["iteration"] for r in kept]
        ax.fill_between(
            iterations,
            [r["rate_min"] for r in kept],
            [r["rate_max"] for r in kept],
            alpha=0.25,
            label="min..max",
        )
        ax.plot(iterations, [r["rate_mean"] for r in kept], label="mean")
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no expert rates in this run", ha="center", va="center")
    ax.set_xlabel("iteration")
    ax.set_ylabel("expert rate")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def save_accuracy_curve(report, path) -> str:
    """Accuracy against observation ratio, mean marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(report.ratios, report.accuracies, marker="o")
    ax.axhline(report.auc, color="gray", linestyle="--", label=f"mean {report.auc:.2f}")
    ax.set_xlabel("observation ratio")
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def save_selection_histogram(report, path) -> str:
    """Per-expert selection counts from the full-observation pass."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if report.histogram:
        names = sorted(report.histogram)
        ax.bar(range(len(names)), [report.histogram[n] for n in names])
        ax.set_xticks(range(len(names)))
        short = [n.split(".", 1)[-1] for n in names]
        ax.set_xticklabels(short, rotation=60, ha="right", fontsize=7)
    else:
        ax.text(0.5, 0.5, "no expert-carrying layers", ha="center", va="center")
    ax.set_ylabel("selections")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def save_ablation_chart(axis: str, rows, path) -> str:
    """Mean area-under-curve per setting; rows are ablation dicts."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [str(r["value"]) for r in rows]
    ax.bar(range(len(rows)), [r["mean_auc"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel(axis)
    ax.set_ylabel("mean AUC [%]")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)