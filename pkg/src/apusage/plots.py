"""Matplotlib renderers for the report paths; every figure is written to a file."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .features import StatTable

# Dropping the Software text chunk keeps PNG bytes stable across library patch bumps.
_PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_stat_table(
    table: StatTable,
    path: str | Path,
    title: str,
    xlabel: str,
    ylabel: str,
    step: bool = False,
) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    if step:
        ax.step(table.x, table.y, where="post")
    else:
        ax.plot(table.x, table.y)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_step_series(
    hours: Sequence[float],
    values: Sequence[float],
    threshold: float,
    flagged: Sequence[bool],
    path: str | Path,
    title: str,
    ylabel: str,
) -> Path:
    hours = np.asarray(hours, dtype=float)
    values = np.asarray(values, dtype=float)
    flagged = np.asarray(flagged, dtype=bool)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(hours, values, marker=".", linewidth=1)
    if flagged.any():
        ax.scatter(hours[flagged], values[flagged], color="crimson", zorder=3, label="flagged")
        ax.legend(loc="lower left")
    ax.axhline(threshold, color="gray", linestyle="--", linewidth=1)
    ax.set_title(title)
    ax.set_xlabel("hour of day")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_day_likelihoods(
    names: Sequence[str],
    totals: Sequence[float],
    abnormal: Sequence[bool],
    path: str | Path,
    title: str,
) -> Path:
    totals = np.asarray(totals, dtype=float)
    abnormal = np.asarray(abnormal, dtype=bool)
    idx = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.scatter(idx[~abnormal], totals[~abnormal], color="tab:blue", label="normal day")
    ax.scatter(idx[abnormal], totals[abnormal], color="crimson", marker="s", label="abnormal day")
    ax.set_xticks(idx)
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylabel("day log-likelihood")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_correlation(matrix: np.ndarray, labels: Sequence[str], path: str | Path) -> Path:
    matrix = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(labels, fontsize=8)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            if np.isfinite(matrix[i, j]):
                ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title("Feature correlation matrix")
    fig.tight_layout()
    return _save(fig, path)
