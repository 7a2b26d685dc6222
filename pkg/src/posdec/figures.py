"""Figure rendering for the report stage.

All figures are written as SVG with a fixed hash salt and no embedded
date, so rerunning a pipeline with the same seed writes byte-identical
files. Rendering uses the Agg backend and never opens a window.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import KEYS, N_SLIDING, Montage

_SVG_OPTIONS = {"metadata": {"Date": None}}


def _deterministic_rc():
    matplotlib.rcParams["svg.hashsalt"] = "posdec"


def save_topomap(xs: np.ndarray, ys: np.ndarray, grid: np.ndarray,
                 montage: Montage, path, title: str = ""):
    """Scalp heatmap of interpolated channel values with electrode dots."""
    _deterministic_rc()
    fig, ax = plt.subplots(figsize=(5.4, 4.6))
    masked = np.ma.masked_invalid(grid)
    im = ax.pcolormesh(xs, ys, masked, shading="nearest", cmap="viridis")
    pos = np.asarray(montage.positions)
    ax.scatter(pos[:, 0], pos[:, 1], s=6, c="black", linewidths=0)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.savefig(path, format="svg", **_SVG_OPTIONS)
    plt.close(fig)


def save_window_scores(centers: np.ndarray, wis_mu: np.ndarray,
                       wis_beta: np.ndarray, is_mu: float, is_beta: float,
                       channel_name: str, path):
    """Window importance series for both bands at the top channel, with
    the whole-trial scores as horizontal reference lines."""
    _deterministic_rc()
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(centers, wis_mu, marker="o", markersize=3, label="mu windows")
    ax.plot(centers, wis_beta, marker="s", markersize=3, label="beta windows")
    ax.axhline(is_mu, linestyle="--", linewidth=1.0, color="C0",
               label="mu whole trial")
    ax.axhline(is_beta, linestyle="--", linewidth=1.0, color="C1",
               label="beta whole trial")
    ax.set_xlabel("window center (s)")
    ax.set_ylabel("importance")
    ax.set_title(f"window importance at {channel_name}")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", **_SVG_OPTIONS)
    plt.close(fig)


def save_confusion(confusion: np.ndarray, path):
    """Confusion heatmap, true keys by predicted keys, percent."""
    _deterministic_rc()
    fig, ax = plt.subplots(figsize=(5.6, 5.0))
    masked = np.ma.masked_invalid(confusion)
    im = ax.imshow(masked, cmap="viridis", origin="upper")
    ax.set_xticks(range(len(KEYS)), [str(k) for k in KEYS])
    ax.set_yticks(range(len(KEYS)), [str(k) for k in KEYS])
    ax.set_xlabel("predicted key")
    ax.set_ylabel("true key")
    for i in range(len(KEYS)):
        for j in range(len(KEYS)):
            v = confusion[i, j]
            if np.isfinite(v):
                ax.text(j, i, f"{v:.1f}", ha="center", va="center",
                        fontsize=7,
                        color="white" if v < np.nanmax(confusion) / 2 else "black")
    fig.colorbar(im, ax=ax, shrink=0.8, label="percent")
    fig.tight_layout()
    fig.savefig(path, format="svg", **_SVG_OPTIONS)
    plt.close(fig)
