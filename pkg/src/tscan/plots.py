"""Figure rendering for the report paths: attention weights, ablation
comparisons, and training curves, written as PNG next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .model import AttentionReport  # noqa: E402


def temporal_weights_figure(report: AttentionReport, path) -> Path:
    """One bar panel per chunk: attention received by each hour position."""
    weights = report.temporal_weights
    if weights is None:
        raise ValueError("report has no temporal weights")
    n = len(weights)
    ncols = min(n, 2)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(5.5 * ncols, 3.2 * nrows),
                             squeeze=False)
    chunk_len = len(weights[0])
    for j, w in enumerate(weights):
        ax = axes[j // ncols][j % ncols]
        hours = [j * chunk_len + i for i in range(chunk_len)]
        ax.bar(range(chunk_len), w, color="#4878cf")
        ax.set_xticks(range(chunk_len))
        ax.set_xticklabels(hours, fontsize=7)
        ax.set_title(f"chunk {j} (hours {hours[0]}-{hours[-1]})", fontsize=9)
        ax.set_xlabel("hour")
        ax.set_ylabel("weight")
    for j in range(n, nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _group_by_variable(names, weights):
    """Sum one-hot columns back to their source variable for display."""
    grouped: dict[str, float] = {}
    for name, w in zip(names, weights):
        var = name.split("=", 1)[0]
        grouped[var] = grouped.get(var, 0.0) + float(w)
    return grouped


def indicator_weights_figure(report: AttentionReport, column_names, path,
                             top_k: int = 15) -> Path:
    """Top-k variables by attention received in the spatial branch;
    one-hot groups are summed per variable for display."""
    if report.indicator_weights is None:
        raise ValueError("report has no indicator weights")
    grouped = _group_by_variable(column_names, report.indicator_weights)
    top = sorted(grouped.items(), key=lambda kv: kv[1], reverse=True)[:top_k]
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    ax.bar(range(len(top)), [w for _, w in top], color="#d65f5f")
    ax.set_xticks(range(len(top)))
    ax.set_xticklabels([name for name, _ in top], rotation=40, ha="right",
                       fontsize=7)
    ax.set_ylabel("weight")
    ax.set_title(f"top {len(top)} indicators by attention weight")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def ablation_figure(rows: list[dict], metric: str, path) -> Path:
    """Bar chart of one metric across the fusion configurations."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    names = [r["fusion"] for r in rows]
    values = [r[metric] for r in rows]
    ax.bar(range(len(rows)), values, color="#6acc65")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=25, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"{metric} by fusion strategy")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def training_curve_figure(log, path) -> Path:
    epochs = [row["epoch"] for row in log.epochs]
    fig, ax1 = plt.subplots(figsize=(6.5, 4.0))
    ax1.plot(epochs, [row["train_loss"] for row in log.epochs],
             color="#4878cf", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="#4878cf")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [row["val_metric"] for row in log.epochs],
             color="#d65f5f", label=f"val {log.metric_name}")
    ax2.set_ylabel(f"val {log.metric_name}", color="#d65f5f")
    ax2.axvline(log.best_epoch, color="gray", linestyle=":", linewidth=1)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
