"""Matplotlib figure rendering for reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_loss_history", "plot_score_trajectory", "plot_latent_heatmap"]


def plot_loss_history(history: list[dict], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h["loss"] for h in history], label="total")
    ax.plot(epochs, [h["recon"] for h in history], label="reconstruction")
    ax.plot(epochs, [h["kl"] for h in history], label="KL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_score_trajectory(scores: list[float], path, trial_size: int | None = None):
    """Per-evaluation scores with the running best overlaid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores = np.asarray(scores, dtype=float)
    running = np.maximum.accumulate(scores)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(scores, ".", alpha=0.5, label="evaluation")
    ax.plot(running, "-", label="running best")
    if trial_size:
        for x in range(trial_size, len(scores), trial_size):
            ax.axvline(x, color="grey", lw=0.5, alpha=0.5)
    ax.set_xlabel("evaluation")
    ax.set_ylabel("score = 1 / (1 + MSE)")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_latent_heatmap(grid_scores: np.ndarray, extent, path):
    """Score heatmap over the 2D principal-component plane."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(
        np.asarray(grid_scores, dtype=float),
        origin="lower",
        extent=extent,
        aspect="auto",
        vmin=0.0,
        vmax=1.0,
        cmap="viridis",
    )
    fig.colorbar(im, ax=ax, label="score = 1 / (1 + MSE)")
    ax.set_xlabel("principal component 1")
    ax.set_ylabel("principal component 2")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
