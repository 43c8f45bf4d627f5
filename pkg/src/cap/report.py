"""Figure rendering for training traces, score reports, and heatmaps.

Every function here writes a PNG next to the delimited outputs the CLI
already produces; nothing is displayed interactively. The Agg backend
is forced before pyplot is touched so the CLI works headless.
"""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .heatmap import HeatmapResult
from .scoring import ScoreReport
from .trainer import TrainingTrace

DPI = 120


def training_curves(trace: TrainingTrace, path) -> None:
    """Loss components and head Frobenius norm per epoch, two panels."""
    epochs = [r.epoch for r in trace.records]
    fig, (ax_loss, ax_norm) = plt.subplots(1, 2, figsize=(9, 3.5))

    ax_loss.plot(epochs, [r.l_s for r in trace.records], label="similarity")
    ax_loss.plot(epochs, [r.omega for r in trace.records], label="constraint")
    ax_loss.plot(epochs, [r.total for r in trace.records], label="total",
                 color="black", linewidth=1.0)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=8)

    ax_norm.plot(epochs, [r.head_frobenius for r in trace.records],
                 color="tab:purple")
    ax_norm.set_xlabel("epoch")
    ax_norm.set_ylabel("head Frobenius norm")

    holdout = [r for r in trace.records if not math.isnan(r.holdout_normal_mean)]
    if holdout:
        ax_h = ax_norm.twinx()
        ax_h.plot([r.epoch for r in holdout],
                  [r.holdout_normal_mean for r in holdout],
                  color="tab:green", linestyle="--", label="holdout normal")
        ax_h.plot([r.epoch for r in holdout],
                  [r.holdout_anomaly_mean for r in holdout],
                  color="tab:red", linestyle="--", label="holdout anomaly")
        ax_h.set_ylabel("mean holdout score")
        ax_h.legend(fontsize=8, loc="upper right")

    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def score_histogram(report: ScoreReport, path) -> None:
    """Score distributions, split by label when labels are present."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    scores = np.asarray(report.scores)
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:  # a flat score set still needs a nonzero bin range
        hi = lo + 1.0
    bins = np.linspace(lo, hi, 60)
    if report.labels is not None:
        labels = np.asarray(report.labels)
        ax.hist(scores[labels == 0], bins=bins, alpha=0.6,
                label="normal", color="tab:green")
        ax.hist(scores[labels == 1], bins=bins, alpha=0.6,
                label="anomaly", color="tab:red")
        ax.legend(fontsize=8)
    else:
        ax.hist(scores, bins=bins, color="tab:blue", alpha=0.8)
    if report.auroc is not None:
        title = f"AUROC {report.auroc:.4f}"
        if report.baseline_auroc is not None:
            title += f" (baseline {report.baseline_auroc:.4f})"
        ax.set_title(title, fontsize=10)
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def sweep_curves(
    values: Sequence[float],
    gaps: Sequence[float],
    aurocs: Sequence[float | None],
    sweep_name: str,
    path,
) -> None:
    """Score gap and AUROC against the swept hyperparameter.

    Points are placed at equal spacing with value tick labels: the
    standard sweeps mix zero with log-spaced values, so neither a
    linear nor a log axis shows every point legibly.
    """
    positions = np.arange(len(values))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(positions, gaps, marker="o", color="tab:blue", label="score gap")
    ax.set_xticks(positions)
    ax.set_xticklabels([f"{v:g}" for v in values])
    ax.set_xlabel(sweep_name)
    ax.set_ylabel("anomaly - normal mean score")
    known = [(p, a) for p, a in zip(positions, aurocs) if a is not None]
    if known:
        ax_a = ax.twinx()
        ax_a.plot([p for p, _ in known], [a for _, a in known],
                  marker="s", color="tab:orange", label="AUROC")
        ax_a.set_ylabel("AUROC")
        ax_a.legend(fontsize=8, loc="lower right")
    ax.legend(fontsize=8, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def heatmap_figure(result: HeatmapResult, path, title: str = "") -> None:
    """Upsampled anomaly heatmap with a shared-scale colorbar."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    image = ax.imshow(result.upsampled, cmap="magma",
                      vmin=result.vmin, vmax=result.vmax)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=10)
    fig.colorbar(image, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
