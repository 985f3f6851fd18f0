"""Matplotlib rendering for report outputs.

Every delimited report the CLI writes gets a figure next to it: attention
CSVs get heat-maps, sweep tables get metric curves, training logs get
loss/validation curves, and metric reports get a bar chart. All figures are
rendered straight to files with the Agg backend.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 144


def _style():
    plt.rcParams.update({
        "figure.dpi": DPI,
        "savefig.dpi": DPI,
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.labelsize": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
    })


def save_attention_heatmap(matrix: np.ndarray, path: str, title: str) -> None:
    _style()
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    image = ax.imshow(matrix, cmap="viridis", aspect="equal", interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel("attended position")
    ax.set_ylabel("query position")
    ax.grid(False)
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_training_curves(log_rows, path: str) -> None:
    """Loss on the left axis, validation metrics on the right."""
    _style()
    epochs = [r.epoch for r in log_rows]
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    ax.plot(epochs, [r.loss for r in log_rows], marker="o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked-item loss")
    handles, labels = ax.get_legend_handles_labels()
    val = [(r.epoch, r.val_hr10, r.val_ndcg10) for r in log_rows
           if not math.isnan(r.val_hr10)]
    if val:
        ax2 = ax.twinx()
        ax2.plot([v[0] for v in val], [v[1] for v in val], color="tab:orange",
                 marker="s", ms=3, label="val HR@10")
        ax2.plot([v[0] for v in val], [v[2] for v in val], color="tab:green",
                 marker="^", ms=3, label="val NDCG@10")
        ax2.set_ylabel("validation metric")
        ax2.grid(False)
        h2, l2 = ax2.get_legend_handles_labels()
        handles += h2
        labels += l2
    ax.legend(handles, labels, loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_sweep_curves(values, metrics_by_name: dict[str, list[float]], path: str,
                      xlabel: str) -> None:
    _style()
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    for name, ys in metrics_by_name.items():
        ax.plot(values, ys, marker="o", ms=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_metric_bars(metrics: dict[str, float], path: str, title: str) -> None:
    _style()
    names = sorted(metrics)
    values = [metrics[n] for n in names]
    fig, ax = plt.subplots(figsize=(5.6, 3.0))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylim(0.0, max(1.0, max(values) * 1.1))
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.annotate(f"{v:.3f}", (i, v), textcoords="offset points",
                    xytext=(0, 2), ha="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
