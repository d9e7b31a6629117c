"""Matplotlib figures for run reports. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evalseg import ARMS  # noqa: E402

PathLike = Union[str, Path]

ARM_LABELS = {"original": "original", "random_crop": "random crop", "grass": "GraSS"}


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _image(t):
    a = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = a.transpose(1, 2, 0)
    return np.clip(a, 0, 1)


def plot_object_counts(rows: Sequence[dict], path: PathLike, title: str = "") -> Path:
    """Per-epoch mean class count (left) and single-class views (right) for each arm."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for arm in ARMS:
        sel = sorted((r for r in rows if r["arm"] == arm), key=lambda r: r["epoch"])
        if not sel:
            continue
        ep = [r["epoch"] for r in sel]
        axes[0].plot(ep, [r["mean_classes"] for r in sel], label=ARM_LABELS[arm])
        axes[1].plot(ep, [r["single_class"] for r in sel], label=ARM_LABELS[arm])
    axes[0].set_ylabel("mean classes per sample")
    axes[1].set_ylabel("single-class samples")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_lam_grid(examples: Sequence[dict], path: PathLike, max_rows: int = 6) -> Path:
    """Rows of view with DAR box, LAM, overlay, and the DACrop result."""
    examples = list(examples)[:max_rows]
    fig, axes = plt.subplots(len(examples), 4, figsize=(8, 2.1 * len(examples)), squeeze=False)
    for row, ex in zip(axes, examples):
        view = _image(ex["view"])
        x, y, h, w = ex["dar"].box
        row[0].imshow(view)
        row[0].add_patch(Rectangle((x - 0.5, y - 0.5), w, h, fill=False, edgecolor="white", linestyle="--", linewidth=1.5))
        row[1].imshow(ex["lam"], cmap="jet", vmin=0, vmax=1)
        row[2].imshow(view)
        row[2].imshow(ex["lam"], cmap="jet", vmin=0, vmax=1, alpha=0.5)
        row[3].imshow(_image(ex["crop"]))
        for ax in row:
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, name in zip(axes[0], ["view + DAR", "LAM", "overlay", "DACrop"]):
        ax.set_title(name, fontsize=9)
    return _save(fig, path)


def plot_sweep(xs: Sequence[float], results: Dict[str, Sequence[float]], path: PathLike, xlabel: str,
               ylabel: str = "mIoU (%)", errors: Dict[str, Sequence[float]] = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, ys in results.items():
        err = (errors or {}).get(name)
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(results) > 1:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_bars(names: Sequence[str], means: Sequence[float], path: PathLike, errors: Sequence[float] = None,
              ylabel: str = "mIoU (%)") -> Path:
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.6))
    ax.bar(range(len(names)), means, yerr=errors, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_losses(run_log: Sequence[dict], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ep = [r["epoch"] for r in run_log]
    ax.plot(ep, [r["mean_loss"] for r in run_log], label="loss")
    guided = [r for r in run_log if "pass1_losses" in r]
    if guided:
        ax.plot([r["epoch"] for r in guided], [np.mean(r["pass1_losses"]) for r in guided], label="pass-1 loss")
        ax.axvline(guided[0]["epoch"] - 0.5, color="grey", linestyle=":")
        ax.legend(frameon=False)
    ax.set_xlabel("epoch")
    ax.set_ylabel("contrastive loss")
    return _save(fig, path)


def plot_lam_triplet(example: dict, path: PathLike) -> Path:
    """Single view: input, LAM heat overlay, input with the DACrop box drawn."""
    view = _image(example["view"])
    x, y, h, w = example["dar"].box
    fig, axes = plt.subplots(1, 3, figsize=(6, 2.2))
    axes[0].imshow(view)
    axes[1].imshow(view)
    axes[1].imshow(example["lam"], cmap="jet", vmin=0, vmax=1, alpha=0.5)
    axes[2].imshow(view)
    axes[2].add_patch(Rectangle((x - 0.5, y - 0.5), w, h, fill=False, edgecolor="white", linestyle="--", linewidth=1.5))
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
