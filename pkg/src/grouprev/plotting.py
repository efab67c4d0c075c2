"""Figures for the CLI's report commands (rendered off-screen to files)."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so identical data gives identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_curves(steps: Sequence[float], series: Mapping[str, Sequence[float]], path: str | os.PathLike,
                ylabel: str = "value") -> None:
    """One line per series against the shared step column; missing values are gaps."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.asarray(steps, dtype=float)
    for name, ys in series.items():
        y = np.array([np.nan if v is None else v for v in ys], dtype=float)
        ax.plot(x, y, label=name, linewidth=1.2)
    ax.set(xlabel="step", ylabel=ylabel)
    if len(series) > 1:
        ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_shaping(group_mean: Sequence[float], group_max: Sequence[float], path: str | os.PathLike,
                 bins: int = 20) -> None:
    """Histograms of the per-group mean and max shaping signal."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    edges = np.linspace(0.0, 1.0, bins + 1)
    ax.hist(group_mean, bins=edges, histtype="step", label="group mean", linewidth=1.2)
    ax.hist(group_max, bins=edges, histtype="step", label="group max", linewidth=1.2)
    ax.set(xlabel=r"$\Delta\phi$", ylabel="groups")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
