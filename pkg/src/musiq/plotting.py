"""Matplotlib figures that accompany the CLI reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_attention(image: np.ndarray, maps: Sequence[np.ndarray],
                   titles: Sequence[str], path) -> Path:
    """Input image next to one relevance heatmap per scale."""
    n = len(maps) + 1
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4))
    axes = np.atleast_1d(axes)
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("input")
    for ax, m, title in zip(axes[1:], maps, titles):
        ax.imshow(m, cmap="inferno", vmin=0)
        ax.set_title(title)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _finish(fig, path)


def plot_hse_similarity(sim: np.ndarray, path, title: str = "") -> Path:
    """G x G panel of cosine-similarity tiles, one per table cell."""
    G = sim.shape[0]
    fig, axes = plt.subplots(G, G, figsize=(0.6 * G + 1, 0.6 * G + 1), squeeze=False)
    for i in range(G):
        for j in range(G):
            ax = axes[i, j]
            ax.imshow(sim[i, j], cmap="viridis", vmin=-1, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def plot_predictions(pred: np.ndarray, truth: np.ndarray, path,
                     srcc: float = None, plcc: float = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(truth, pred, s=12, alpha=0.7)
    lo = float(min(np.min(pred), np.min(truth)))
    hi = float(max(np.max(pred), np.max(truth)))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("label")
    ax.set_ylabel("prediction")
    if srcc is not None:
        ax.set_title(f"SRCC {srcc:.3f}  PLCC {plcc:.3f}")
    return _finish(fig, path)


def plot_loss_curve(history: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [h["step"] for h in history]
    ax.plot(steps, [h["loss"] for h in history], marker=".")
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    ax.set_yscale("log")
    return _finish(fig, path)
