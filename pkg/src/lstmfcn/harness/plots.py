"""Figures written next to the CSV reports."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def activation_figure(path, columns: dict, title: str = ""):
    """One stacked panel per exported column (raw input first)."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(columns), 1, figsize=(7, 1.6 * len(columns)), sharex=True, squeeze=False)
        for ax, (name, values) in zip(axes[:, 0], columns.items()):
            ax.plot(np.arange(len(values)), values, lw=1.0, color="k" if name == "raw" else "C0")
            ax.set_ylabel(name, rotation=0, ha="right", va="center")
        axes[-1, 0].set_xlabel("time step")
        if title:
            axes[0, 0].set_title(title)
        return _save(fig, path)


def training_curves(path, losses, lrs, accuracies, title: str = ""):
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 2.8))
        epochs = np.arange(1, len(losses) + 1)
        a1.plot(epochs, losses, label="train loss")
        a1.set_yscale("log")
        a1.set_xlabel("epoch")
        a1b = a1.twinx()
        a1b.plot(epochs, lrs, color="C1", lw=0.8, label="learning rate")
        a1b.set_yscale("log")
        a1.set_title("loss / learning rate")
        a2.plot(epochs, accuracies, color="C2")
        a2.set_ylim(-0.02, 1.02)
        a2.set_xlabel("epoch")
        a2.set_title("test accuracy")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def paired_scatter(path, x, y, xlabel, ylabel, title: str = ""):
    """Accuracy of one arm against another; points above the diagonal favour ``y``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.scatter(x, y, s=14)
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_aspect("equal")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def probe_bars(path, table: dict, title: str = ""):
    """Grouped bars of mean probe accuracy per feature set."""
    feature_sets = sorted({k[0] for k in table})
    probes = sorted({k[1] for k in table})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        width = 0.8 / len(probes)
        for i, probe in enumerate(probes):
            vals = [np.nanmean(table.get((f, probe), [math.nan])) for f in feature_sets]
            ax.bar(np.arange(len(feature_sets)) + i * width, vals, width, label=probe)
        ax.set_xticks(np.arange(len(feature_sets)) + width * (len(probes) - 1) / 2, feature_sets)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("mean test accuracy")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def pvalue_matrix(path, models, pvalues: dict, alpha: float, title: str = ""):
    """Upper-triangle heatmap of pairwise p-values (log scale)."""
    n = len(models)
    grid = np.full((n, n), np.nan)
    for (a, b), p in pvalues.items():
        grid[models.index(a), models.index(b)] = p
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(1.1 * n + 1.5, 1.0 * n + 0.8))
        shown = np.log10(np.clip(grid, 1e-300, 1))
        im = ax.imshow(shown, cmap="viridis_r")
        for i in range(n):
            for j in range(n):
                if not np.isnan(grid[i, j]):
                    mark = "*" if grid[i, j] < alpha else ""
                    ax.text(j, i, f"{grid[i, j]:.2g}{mark}", ha="center", va="center", fontsize=7, color="w")
        ax.set_xticks(range(n), models, rotation=30)
        ax.set_yticks(range(n), models)
        fig.colorbar(im, ax=ax, label="log10 p")
        if title:
            ax.set_title(title)
        return _save(fig, path)
