"""Figures for the report path: training curves, robustness curve, ablation bars.

Rendering uses the non-interactive Agg backend and only writes files.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(logs, path):
    """Average-Q and mean recommender reward per epoch, one line per labelled log."""
    fig, (ax_q, ax_r) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, log in logs.items():
        epochs = [r.epoch for r in log.records]
        ax_q.plot(epochs, [r.average_q for r in log.records], marker=".", label=label)
        ax_r.plot(epochs, [r.mean_reward_rec for r in log.records], marker=".", label=label)
    ax_q.set_xlabel("epoch")
    ax_q.set_ylabel("Average-Q")
    ax_r.set_xlabel("epoch")
    ax_r.set_ylabel("mean recommender reward")
    ax_q.legend()
    return _save(fig, path)


def plot_robustness(reports, path, k=10):
    """Metric@k against noise level; ``reports`` maps level to MetricReport."""
    levels = sorted(reports)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for metric in ("hr", "recall", "ndcg"):
        ax.plot(levels, [getattr(reports[lv], metric)[k] for lv in levels], marker="o", label=f"{metric}@{k}")
    ax.set_xlabel("noise level")
    ax.set_ylabel("score")
    ax.set_xticks(levels)
    ax.legend()
    return _save(fig, path)


def plot_ablation(reports, path):
    """Grouped bars of HR/Recall/NDCG at each k for every model."""
    models = list(reports)
    ks = list(next(iter(reports.values())).ks)
    metrics = ("hr", "recall", "ndcg")
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.5), sharey=True)
    width = 0.8 / len(models)
    for ax, metric in zip(axes, metrics):
        for j, model in enumerate(models):
            values = [getattr(reports[model], metric)[k] for k in ks]
            ax.bar([i + j * width for i in range(len(ks))], values, width, label=model)
        ax.set_xticks([i + width * (len(models) - 1) / 2 for i in range(len(ks))])
        ax.set_xticklabels([f"@{k}" for k in ks])
        ax.set_title(metric)
    axes[0].legend()
    return _save(fig, path)
