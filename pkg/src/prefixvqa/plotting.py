"""Figures written next to the text reports (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STRATA = ("overall", "open", "yesno")


def plot_losses(report, path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = np.arange(1, len(report.train_losses) + 1)
    ax.plot(epochs, report.train_losses, marker="o", label="train")
    if report.val_losses:
        ax.plot(epochs[: len(report.val_losses)], report.val_losses, marker="s", label="validation")
    if report.best_epoch:
        ax.axvline(report.best_epoch, color="grey", linestyle=":", label=f"best epoch {report.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_eval(report, path, title: str = "evaluation") -> None:
    metrics = ("bleu1", "f1", "accuracy")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.25
    x = np.arange(len(STRATA))
    for i, metric in enumerate(metrics):
        vals = [(report.scores[s] or {}).get(metric, 0.0) * 100 for s in STRATA]
        ax.bar(x + (i - 1) * width, vals, width, label=metric)
    ax.set_xticks(x, [f"{s}\n(n={report.counts.get(s, 0)})" for s in STRATA])
    ax.set_ylim(0, 100)
    ax.set_ylabel("score (%)")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(result, path, chance: float | None = None) -> None:
    templates = list(result.reports)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.27
    x = np.arange(len(templates))
    for i, stratum in enumerate(STRATA):
        vals = [(result.reports[t].accuracy(stratum) or 0.0) * 100 for t in templates]
        ax.bar(x + (i - 1) * width, vals, width, label=stratum)
    if chance is not None:
        ax.axhline(chance * 100, color="black", linestyle="--", linewidth=1, label="open-set chance")
    ax.set_xticks(x, [t.value for t in templates])
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.set_title("prompt structure ablation")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
