"""Figures for the CLI reports, rendered to files with the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .cost import CostReport  # noqa: E402
from .importance import ImportanceMap  # noqa: E402


def plot_cost(report: CostReport, path) -> None:
    """FLOPs and parameters per stage as side-by-side bars."""
    groups = report.by_stage()
    names = list(groups)
    flops = [groups[n][0] / 1e9 for n in names]
    params = [groups[n][1] / 1e6 for n in names]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(names, flops, color="tab:blue")
    axes[0].set_ylabel("GFLOPs")
    axes[1].bar(names, params, color="tab:orange")
    axes[1].set_ylabel("parameters (M)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle(f"total {report.total_flops / 1e9:.3f} GFLOPs, {report.total_params / 1e6:.2f} M params")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_importance(imap: ImportanceMap, path, batch: int = 0) -> None:
    """Deformed key locations of every layer, colored by importance."""
    n = len(imap)
    cols = min(n, 4)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.axis("off")
    for ax, layer in zip(axes.flat, imap.layers):
        locs = layer.key_locations[batch].reshape(-1, 2)
        scores = layer.scores[batch].reshape(-1)
        ax.scatter(locs[:, 0], locs[:, 1], c=scores, s=12, cmap="viridis")
        ax.set_xlim(-1.05, 1.05)
        ax.set_ylim(1.05, -1.05)
        ax.set_aspect("equal")
        ax.set_title(layer.name, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training(losses, accuracies, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = range(len(losses))
    ax.plot(steps, losses, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax2 = ax.twinx()
    ax2.plot(steps, accuracies, color="tab:green", alpha=0.6, label="batch accuracy")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.05)
    fig.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
