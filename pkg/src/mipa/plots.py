from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training(metrics: list, path):
    train = [r for r in metrics if r["kind"] == "train"]
    evals = [r for r in metrics if r["kind"] == "eval" and r.get("ap50_avg") is not None]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax0.plot([r["step"] for r in train], [r["l_det"] for r in train], label="l_det")
    if any(r["l_ma"] for r in train):
        ax0.plot([r["step"] for r in train], [r["l_ma"] for r in train], label="l_ma")
        ax0.plot([r["step"] for r in train], [r["lambda_ma"] for r in train], label="lambda")
    ax0.set_xlabel("step")
    ax0.legend()
    for key in ("ap50_rgb", "ap50_ir", "ap50_avg"):
        ax1.plot([r["epoch"] for r in evals], [r[key] for r in evals], marker="o", label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylim(0, 1)
    ax1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_grid(rows: list, path, metric: str = "ap50"):
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 1.3 * len(rows)), 4))
    for offset, modality in zip((-0.27, 0.0, 0.27), ("rgb", "ir", "avg")):
        means = [r[f"{metric}_{modality}_mean"] for r in rows]
        stds = [r[f"{metric}_{modality}_std"] for r in rows]
        ax.bar(x + offset, means, 0.27, yerr=stds, capsize=3, label=modality)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(metric.upper())
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
