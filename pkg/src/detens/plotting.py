"""Figures written next to the CSV reports (reliability diagram, ablations, latency)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def plot_reliability(result, path, title: str = "") -> None:
    """Bar per confidence bin at its precision, with the gap to the bin's mean confidence."""
    fig, ax = plt.subplots(figsize=(4, 4))
    bins = [b for b in result.bins]
    width = bins[0].hi - bins[0].lo if bins else 0.1
    centers = [(b.lo + b.hi) / 2 for b in bins]
    prec = [b.precision if b.count else 0.0 for b in bins]
    conf = [b.mean_conf if b.count else c for b, c in zip(bins, centers)]
    ax.bar(centers, prec, width=width, edgecolor="k", color="tab:blue", label="precision")
    gap_base = [min(p, c) for p, c in zip(prec, conf)]
    gap = [abs(c - p) if b.count else 0.0 for b, p, c in zip(bins, prec, conf)]
    # hatched outline so the precision bar underneath stays readable
    ax.bar(centers, gap, bottom=gap_base, width=width, color="none", hatch="//", edgecolor="tab:red", label="gap to mean confidence")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("precision")
    ax.set_title(title or f"D-ECE = {100 * result.dece:.1f}")
    ax.legend(loc="upper left", fontsize=8)
    _save(fig, path)


def plot_ablation(rows: List[Dict], x_key: str, path, metrics=("pdq", "dece", "map")) -> None:
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3))
    axes = np.atleast_1d(axes)
    labels = [str(r[x_key]) for r in rows]
    xs = np.arange(len(rows))
    for ax, m in zip(axes, metrics):
        ax.errorbar(xs, [r[m] for r in rows], yerr=[r.get(f"{m}_se", 0.0) for r in rows], marker="o", capsize=3)
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, rotation=20 if len(max(labels, key=len)) > 3 else 0)
        ax.set_xlabel(x_key)
        ax.set_title(m.upper() if m != "dece" else "D-ECE")
    fig.tight_layout()
    _save(fig, path)


def plot_benchmark(rows: Sequence[Dict], path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for layout in dict.fromkeys(r["layout"] for r in rows):
        sel = [r for r in rows if r["layout"] == layout]
        ax.errorbar([r["groups"] for r in sel], [r["mean_ms"] for r in sel], yerr=[r["std_ms"] for r in sel], marker="o", capsize=2, label=layout)
    ax.set_xlabel("groups G")
    ax.set_ylabel("latency (ms)")
    ax.legend(fontsize=7)
    _save(fig, path)
