"""Tables and figures written by the command-line tools."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed ids and no timestamp so reruns produce identical SVG bytes
    plt.rcParams["svg.hashsalt"] = "liteheart"
    return plt


def _save(fig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    fig.savefig(path, metadata=meta)
    fig.clf()


def write_per_class_csv(path: Path, class_names: list[str], rows: dict[str, list[float]]) -> None:
    """One row per system, one column per class, AUC values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", *class_names])
        for name, aucs in rows.items():
            w.writerow([name, *(f"{a:.6f}" for a in aucs)])


def plot_ablation(table: dict, path: Path, metric: str = "macro_f1") -> None:
    plt = _pyplot()
    names = list(table)
    means = [100 * table[n][metric]["mean"] for n in names]
    stds = [100 * table[n][metric]["std"] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="#4a7ab5")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel(f"{metric} (%)")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_saliency(signal: np.ndarray, heatmap: np.ndarray, path: Path, window: tuple[int, int] | None = None,
                  title: str = "") -> None:
    """Signal trace with the heatmap as a background band; ``window`` marks the ground truth."""
    plt = _pyplot()
    sig = np.asarray(signal).reshape(-1)
    h = np.asarray(heatmap).reshape(-1)
    fig, ax = plt.subplots(figsize=(8, 2.5))
    ax.imshow(h[None, :], aspect="auto", cmap="Reds", vmin=0, vmax=1,
              extent=(0, len(h), float(sig.min()), float(sig.max())), alpha=0.6)
    ax.plot(sig, color="k", lw=0.8)
    if window is not None:
        ax.axvspan(*window, fill=False, ls="--", ec="tab:blue")
    ax.set_xlabel("sample")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_tier_sweep(rows: list[dict], path: Path) -> None:
    """Scatter of forward FLOPs against parameter count, one point per system."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in rows:
        ax.scatter(r["flops_per_forward"] / 1e9, r["param_count"] / 1e6)
        ax.annotate(r["name"], (r["flops_per_forward"] / 1e9, r["param_count"] / 1e6), fontsize=8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("GFLOPs per forward (batch 4)")
    ax.set_ylabel("parameters (M)")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
