"""Report figures rendered straight to image files (no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .diffusion.train import smoothed  # noqa: E402

PHASE_COLOURS = {"base_pretrain": "tab:blue", "branch_train": "tab:orange", "joint": "tab:green"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(records: Sequence[tuple], path, window: int = 100) -> Path:
    """Raw and smoothed loss per phase from metrics-log records (step, loss, lr, phase)."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    offset = 0
    phases: Dict[str, List[tuple]] = {}
    for rec in records:
        phases.setdefault(rec[3], []).append(rec)
    for phase, recs in phases.items():
        steps = np.array([r[0] for r in recs]) + offset
        loss = np.array([r[1] for r in recs])
        colour = PHASE_COLOURS.get(phase, "tab:gray")
        ax.plot(steps, loss, color=colour, alpha=0.25, lw=0.6)
        ax.plot(steps, smoothed(loss, window), color=colour, lw=1.6, label=phase)
        offset = int(steps.max()) if len(steps) else offset
    ax.set_xlabel("step")
    ax.set_ylabel("masked loss")
    ax.set_yscale("log")
    if phases:
        ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def _to_rgb(img: np.ndarray) -> np.ndarray:
    """(3, V, U) in [-1, 1] or (V, U, 3) in [0, 1] to displayable (V, U, 3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = (img.transpose(1, 2, 0) + 1.0) / 2.0
    return np.clip(img, 0.0, 1.0)


def sample_grid(rows: Sequence[Dict[str, np.ndarray]], path, titles: Optional[Sequence[str]] = None) -> Path:
    """One row per item, one column per named image (e.g. reference, matched, shuffled)."""
    names = list(rows[0]) if rows else []
    fig, axes = plt.subplots(len(rows), len(names), figsize=(1.8 * len(names), 1.8 * len(rows)), squeeze=False)
    for i, row in enumerate(rows):
        for j, name in enumerate(names):
            ax = axes[i, j]
            ax.imshow(_to_rgb(row[name]), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(name, fontsize=9)
        if titles is not None:
            axes[i, 0].set_ylabel(titles[i], fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def verify_report(results, path) -> Path:
    """Horizontal bar per check, green for pass and red for fail."""
    names = [r.name for r in results]
    ok = [r.ok for r in results]
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(results) + 0.8))
    ax.barh(range(len(results)), [1] * len(results), color=["tab:green" if k else "tab:red" for k in ok])
    for i, r in enumerate(results):
        ax.text(0.02, i, f"{r.name}: {'PASS' if r.ok else 'FAIL'} ({r.metric:.3g})", va="center", fontsize=8, color="white")
    ax.set_yticks([])
    ax.set_xticks([])
    ax.invert_yaxis()
    ax.set_title(f"{sum(ok)}/{len(ok)} checks passed", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)
