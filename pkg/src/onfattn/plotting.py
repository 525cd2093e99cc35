"""The single place that renders images.

Set ``ONFATTN_NO_PLOTS=1`` to skip rendering (CSV/array outputs are still
written). Figures use the Agg backend and fixed metadata so the same table
always yields the same PNG bytes.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_PNG_META = {"Software": None}


def plots_enabled() -> bool:
    return os.environ.get("ONFATTN_NO_PLOTS", "").strip().lower() not in ("1", "true", "yes")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def attention_heatmap(weights: np.ndarray, D: int, path, onset_frames=None, title: str = "") -> Path | None:
    """Draw a ``(T, 2D+1)`` weight matrix with relative offset on the y axis."""
    if not plots_enabled():
        return None
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    T = weights.shape[0]
    fig, ax = plt.subplots(figsize=(max(4.0, min(16.0, T / 40)), 3.0))
    ax.imshow(weights.T, aspect="auto", origin="lower", cmap="viridis", extent=(-0.5, T - 0.5, -D - 0.5, D + 0.5))
    for t in [] if onset_frames is None else np.asarray(onset_frames).ravel():
        ax.axvline(float(t), color="red", lw=0.6, alpha=0.7)
    ax.set_xlabel("frame")
    ax.set_ylabel("offset")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def dsweep_figure(table: list[dict], path) -> Path | None:
    """F1 against D for the three metric families, with std bands and a p-value panel."""
    if not plots_enabled():
        return None
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(table, key=lambda r: float(r["D"]))
    D = np.array([float(r["D"]) for r in rows])
    fig, (ax, axp) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    for family, colour in (("frame", "C0"), ("note", "C1"), ("note_offset", "C2")):
        mean = np.array([float(r[f"{family}_f1"]) for r in rows]) * 100
        std = np.array([float(r[f"{family}_f1_std"]) for r in rows]) * 100
        ax.plot(D, mean, "o-", color=colour, label=family)
        ax.fill_between(D, mean - std, mean + std, color=colour, alpha=0.2)
        if f"base_{family}_f1" in rows[0]:
            ax.axhline(float(rows[0][f"base_{family}_f1"]) * 100, color=colour, ls="--", lw=0.8)
        p = np.array([float(r.get(f"{family}_p", "nan") or "nan") for r in rows])
        axp.plot(D, p, "o-", color=colour)
    ax.set_ylabel("F1 (%)")
    ax.legend(fontsize=8)
    axp.axhline(0.05, color="k", ls=":", lw=0.8)
    axp.set_ylabel("p-value")
    axp.set_xlabel("D")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
