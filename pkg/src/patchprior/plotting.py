"""Figures written to files next to the CSV outputs (headless backend)."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _show(ax, img, title):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    elif img.ndim == 3:
        img = np.moveaxis(img, 0, -1)
    ax.imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1)
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def method_bars(summary: list[dict], path: str | os.PathLike, title: str = "") -> Path:
    """Mean PSNR per method."""
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(summary), 3))
    names = [r["method"] for r in summary]
    ax.bar(names, [r["mean_psnr"] for r in summary], color="0.4")
    ax.set_ylabel("mean PSNR (dB)")
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def reconstruction_grid(truth: np.ndarray, recs: dict[str, np.ndarray], path: str | os.PathLike) -> Path:
    """Ground truth followed by one panel per method."""
    fig, axes = plt.subplots(1, len(recs) + 1, figsize=(2 * (len(recs) + 1), 2.2))
    _show(axes[0], truth, "ground truth")
    for ax, (name, img) in zip(axes[1:], recs.items()):
        _show(ax, img, name)
    return _save(fig, path)


def overfitting_curves(curve: list[dict], path: str | os.PathLike) -> Path:
    """Mean PSNR against fine-tuning budget, one line per model."""
    fig, ax = plt.subplots(figsize=(4, 3))
    for model in dict.fromkeys(r["model"] for r in curve):
        rows = sorted((r for r in curve if r["model"] == model), key=lambda r: r["budget"])
        ax.plot([r["budget"] for r in rows], [r["mean_psnr"] for r in rows], marker="o", label=model)
    ax.set_xlabel("fine-tuning steps")
    ax.set_ylabel("mean PSNR (dB)")
    ax.legend()
    return _save(fig, path)


def paired_scatter(rows: list[dict], path: str | os.PathLike) -> Path:
    """PSNR with refinement against PSNR without, with the identity line."""
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    a = np.array([r["psnr_without"] for r in rows])
    b = np.array([r["psnr_with"] for r in rows])
    lo, hi = min(a.min(), b.min()) - 0.5, max(a.max(), b.max()) + 0.5
    ax.plot([lo, hi], [lo, hi], color="red", lw=1)
    ax.scatter(a, b, s=12, color="k")
    ax.set_xlabel("PSNR without refinement (dB)")
    ax.set_ylabel("PSNR with refinement (dB)")
    return _save(fig, path)


def sample_grid(samples: np.ndarray, path: str | os.PathLike, cols: int = 8) -> Path:
    rows = int(np.ceil(len(samples) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, s in zip(axes.flat, samples):
        _show(ax, s, "")
    return _save(fig, path)


def training_curve(steps, losses, path: str | os.PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.semilogy(steps, losses, lw=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("DSM loss")
    return _save(fig, path)
