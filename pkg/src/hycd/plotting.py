"""
Static report figures.

Figures are built with the object-oriented matplotlib API (no pyplot state)
and written straight to disk, so this module is safe to use from worker
threads and headless sessions.
"""

from __future__ import annotations

import os

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

METHOD_ORDER = ["C2VA", "DCVA Otsu", "DCVA Ada (1)", "DCVA Ada (2)", "DCVA Ada (3)"]


def _save(fig, path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, bbox_inches="tight")


def display_composite(img, bands=None):
    """Three-band (or gray) composite stretched to the 2-98 % range per band."""
    data = img.data
    if bands is None:
        bands = [0, data.shape[0] // 2, data.shape[0] - 1] if data.shape[0] >= 3 else [0]
    planes = []
    valid = img.valid_mask
    for k in bands:
        p = data[k].astype(np.float64)
        v = p[valid]
        lo, hi = np.percentile(v, [2, 98]) if v.size else (0.0, 1.0)
        planes.append(np.clip((p - lo) / (hi - lo if hi > lo else 1.0), 0, 1))
    out = np.stack(planes, axis=-1)
    out[~valid] = 0
    return out if out.shape[-1] == 3 else out[..., 0]


def plot_run_panel(before, after, score, cmap, path, title=None, bands=None):
    """Before / after composites, the score map and the binary mask side by side."""
    fig = Figure(figsize=(13, 3.6))
    axes = fig.subplots(1, 4)
    for ax, img, label in ((axes[0], before, "before"), (axes[1], after, "after")):
        comp = display_composite(img, bands)
        ax.imshow(comp, cmap=None if comp.ndim == 3 else "gray")
        ax.set_title(label)
    im = axes[2].imshow(np.where(score.valid_mask, score.values, np.nan), cmap="magma")
    fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
    axes[2].set_title(score.tag)
    axes[3].imshow(cmap.mask, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    axes[3].set_title(f"{cmap.method_tag}: {cmap.changed_percent:.1f} %")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_magnitude_angle(magnitude, angle, path, title=None):
    fig = Figure(figsize=(9, 3.8))
    ax1, ax2 = fig.subplots(1, 2)
    im1 = ax1.imshow(np.where(magnitude.valid_mask, magnitude.values, np.nan), cmap="viridis")
    fig.colorbar(im1, ax=ax1, fraction=0.046, pad=0.04)
    ax1.set_title("magnitude")
    im2 = ax2.imshow(np.where(angle.valid_mask, angle.values, np.nan), cmap="twilight",
                     vmin=0, vmax=np.pi)
    fig.colorbar(im2, ax=ax2, fraction=0.046, pad=0.04)
    ax2.set_title("angle (rad)")
    for ax in (ax1, ax2):
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_changed_percent(table, path):
    """Grouped bars of changed-pixel percentage per location and method.

    ``table`` maps location -> {method label -> percent or None}.
    """
    locations = list(table)
    methods = [m for m in METHOD_ORDER if any(m in table[loc] for loc in locations)]
    methods += sorted({m for loc in locations for m in table[loc]} - set(methods))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(locations))

    fig = Figure(figsize=(max(6, 1.3 * len(locations) + 2), 4))
    ax = fig.subplots()
    for i, m in enumerate(methods):
        vals = [table[loc].get(m) for loc in locations]
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(locations, rotation=30, ha="right")
    ax.set_ylabel("changed pixels (%)")
    ax.legend(fontsize="small", ncol=min(len(methods), 3))
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)
