"""Figure rendering for report outputs.

Every figure lands next to the delimited output it illustrates; callers
that want machine-readable results only can skip these.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_success_curve(curve: list[tuple[float, float]], path: str | Path, title: str = "") -> None:
    """Threshold (% of side) vs success-rate curve."""
    thr = [t for t, _ in curve]
    rate = [r * 100.0 for _, r in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(thr, rate, lw=2)
    for mark in (1.0, 5.0):
        ax.axvline(mark, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("corner error threshold (% of image side)")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 102)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bucket_bars(buckets: list[dict], path: str | Path) -> None:
    """Per-rotation-bucket success rates as grouped bars."""
    labels = [b["bucket"] for b in buckets]
    u1 = [100.0 * (b["pct_under_1"] or 0.0) for b in buckets]
    u5 = [100.0 * (b["pct_under_5"] or 0.0) for b in buckets]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.18, u1, width=0.36, label="error < 1%")
    ax.bar(x + 0.18, u5, width=0.36, label="error < 5%")
    ax.set_xticks(x, labels)
    ax.set_xlabel("absolute rotation range (deg)")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 102)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_normalizer_histogram(
    values: dict[str, np.ndarray], path: str | Path, title: str = ""
) -> None:
    """Histogram of ground-truth-positive confidences per normalizer."""
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 1.0, 41)
    for name, vals in values.items():
        if len(vals):
            ax.hist(vals, bins=bins, alpha=0.55, label=name)
    ax.axvline(0.5, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("confidence at ground-truth positives")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_angle_filter_plot(
    angles_deg: np.ndarray, kept: np.ndarray, bounds_deg: tuple[float, float], path: str | Path
) -> None:
    """Scatter of detected angles with the median and the kept/dropped split."""
    fig, ax = plt.subplots(figsize=(6, 3))
    idx = np.arange(len(angles_deg))
    kept = np.asarray(kept, dtype=bool)
    ax.scatter(idx[kept], angles_deg[kept], s=14, color="tab:blue", label="kept")
    if (~kept).any():
        ax.scatter(idx[~kept], angles_deg[~kept], s=14, color="lightblue", label="removed")
    if len(angles_deg):
        ax.axhline(float(np.median(angles_deg[kept])) if kept.any() else 0.0, color="green", lw=1)
    for b in bounds_deg:
        ax.axhline(b, color="red", lw=0.8, ls="--")
    ax.set_xlabel("selected coarse match")
    ax.set_ylabel("detected angle (deg)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
