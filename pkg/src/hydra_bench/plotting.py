"""Report figures, rendered off-screen to PNG files."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}  # keep the bytes independent of the matplotlib version


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def _series(rows, x: str, keys=("victim", "patch")):
    out = defaultdict(list)
    for r in rows:
        out[tuple(r[k] for k in keys)].append(r)
    return {k: sorted(v, key=lambda r: r[x]) for k, v in out.items()}


def plot_trajectories(rows: Sequence[dict], path) -> Path:
    """MODA and recall against attack epoch, one line per (victim, patch)."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharex=True)
    for (victim, patch), rs in _series(rows, "epoch").items():
        ep = [r["epoch"] for r in rs]
        for ax, metric in zip(axes, ("moda", "recall")):
            ax.plot(ep, [np.nan if r[metric] is None else r[metric] for r in rs], marker="o", ms=3,
                    label=f"{patch} vs {victim}")
    for ax, metric in zip(axes, ("MODA", "Recall")):
        ax.set_xlabel("attack epoch")
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> Path:
    """MODA against the number of attacked views."""
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    for (victim, patch), rs in _series(rows, "k").items():
        ax.plot([r["k"] for r in rs], [np.nan if r["moda"] is None else r["moda"] for r in rs],
                marker="o", ms=3, label=f"{patch} vs {victim}")
    ax.set_xlabel("attacked views k")
    ax.set_ylabel("MODA")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_transfer_matrix(patches: Sequence[str], victims: Sequence[str], drops: np.ndarray, path) -> Path:
    """Heatmap of relative MODA drop, rows = patches, columns = victims."""
    drops = np.asarray(drops, dtype=float)
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(victims), 1.2 + 0.45 * len(patches)))
    finite = drops[np.isfinite(drops)]
    vmin = min(0.0, float(finite.min())) if finite.size else 0.0
    im = ax.imshow(drops, cmap="magma", vmin=vmin, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(victims)), victims)
    ax.set_yticks(range(len(patches)), patches)
    for i in range(drops.shape[0]):
        for j in range(drops.shape[1]):
            if np.isfinite(drops[i, j]):
                ax.text(j, i, f"{drops[i, j]:.2f}", ha="center", va="center",
                        color="white" if drops[i, j] < 0.6 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="relative MODA drop")
    fig.tight_layout()
    return _save(fig, path)


def plot_occupancy(maps: Sequence[np.ndarray], titles: Sequence[str], path) -> Path:
    """Side-by-side ground occupancy heatmaps (e.g. truth, clean, attacked)."""
    fig, axes = plt.subplots(1, len(maps), figsize=(2.6 * len(maps), 2.6))
    for ax, m, t in zip(np.atleast_1d(axes), maps, titles):
        ax.imshow(m, cmap="viridis", vmin=0, vmax=1, origin="lower")
        ax.set_title(t, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)
