"""Report figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_rewards(rows: Sequence[dict], path) -> Path:
    t = [r["t"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("r_reach", "r_velocity_direction", "r_head_height", "r_feet_clearance"):
        ax.plot(t, [r[key] for r in rows], label=key)
    term = [r for r in rows if r["termination"]]
    if term:
        ax.axvline(term[-1]["t"], color="k", ls="--", lw=0.8)
        ax.set_title(f"terminated: {term[-1]['termination']} at t={term[-1]['t']:.2f} s")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("reward term")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_curriculum(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    fams = sorted({r["family"] for r in rows})
    for fam in fams:
        sel = [r for r in rows if r["family"] == fam]
        ax.plot([r["episode"] for r in sel], [r["next_difficulty"] for r in sel], label=fam, lw=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel("difficulty s")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_bench(rows: Sequence[dict], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    names = [r["variant"] for r in rows]
    axes[0].bar(names, [r["macs"] for r in rows], color=["tab:blue", "tab:orange"])
    axes[0].set_ylabel("encoder MACs")
    timed = [r for r in rows if r["median_ns"] is not None]
    if timed:
        axes[1].bar([r["variant"] for r in timed], [r["median_ns"] / 1e6 for r in timed],
                    yerr=[[0] * len(timed), [(r["p95_ns"] - r["median_ns"]) / 1e6 for r in timed]],
                    color=["tab:blue", "tab:orange"][: len(timed)])
        axes[1].set_ylabel("median forward [ms]")
    else:
        axes[1].set_axis_off()
    return _save(fig, path)


def plot_voxel_slices(occupancy: np.ndarray, path, n_slices: int = 8) -> Path:
    """Evenly spaced z slices of a (C, H, W) occupancy grid, viewed from above."""
    occ = np.asarray(occupancy)
    idx = np.linspace(0, occ.shape[0] - 1, n_slices).round().astype(int)
    fig, axes = plt.subplots(1, n_slices, figsize=(1.6 * n_slices, 2))
    for ax, c in zip(np.atleast_1d(axes), idx):
        ax.imshow(occ[c], origin="lower", cmap="Greys", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(f"z={c}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_occupancy(ticks: Sequence[tuple], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.step([t for t, _ in ticks], [n for _, n in ticks], where="post")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("occupied voxels")
    return _save(fig, path)
