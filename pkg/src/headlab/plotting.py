"""Matplotlib renderings for reports; every function writes one PNG and returns its path."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _grid_axes(ax, L, H):
    ax.set_xticks(range(H))
    ax.set_yticks(range(L))
    ax.set_xlabel("head")
    ax.set_ylabel("layer")


def plot_rgb(image: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(1 + 0.4 * image.shape[1], 1 + 0.4 * image.shape[0]))
    ax.imshow(image, interpolation="nearest")
    _grid_axes(ax, *image.shape[:2])
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_overlay(H: np.ndarray, path, title: str = "mean utilization") -> Path:
    fig, ax = plt.subplots(figsize=(2 + 0.4 * H.shape[1], 1 + 0.4 * H.shape[0]))
    im = ax.imshow(H, cmap="gray_r", vmin=0.0, vmax=1.0, interpolation="nearest")
    _grid_axes(ax, *H.shape)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_layer_scores(scores: dict[str, Sequence[float]], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in scores.items():
        ax.plot(range(len(ys)), ys, marker="o", label=label)
    ax.set_xlabel("layer")
    ax.set_ylabel("best-head accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    if scores:
        ax.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_diffs(labels: Sequence[str], diffs: dict[str, Sequence[float | None]], path,
               title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 4))
    width = 0.8 / max(1, len(diffs))
    x = np.arange(len(labels))
    for k, (name, vals) in enumerate(diffs.items()):
        ys = [np.nan if v is None else v for v in vals]
        ax.bar(x + k * width, ys, width, label=name)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("score minus single-task")
    ax.set_title(title)
    if diffs:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_matrix(rows: Sequence[str], cols: Sequence[str], values: np.ndarray, path,
                title: str = "") -> Path:
    """Annotated heat table, used for the task-pair score matrix."""
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(cols), 1 + 0.6 * len(rows)))
    ax.imshow(values, cmap="viridis", interpolation="nearest")
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows)
    for (i, j), v in np.ndenumerate(values):
        if np.isfinite(v):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", color="white", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
