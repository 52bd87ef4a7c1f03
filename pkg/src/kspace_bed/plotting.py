"""Matplotlib figures for run reports (written to files, never shown)."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_run(path, truth_image, mean_image, coverage, fractions, ssims, psnrs) -> None:
    """Truth, posterior mean, acquired k-space and metric curves in one figure."""
    fig, ax = plt.subplots(1, 4, figsize=(14, 3.4))
    for a, img, title in (
        (ax[0], truth_image, "truth |x|"),
        (ax[1], mean_image, "posterior mean |x|"),
        (ax[2], np.fft.fftshift(coverage), "acquired k-space"),
    ):
        if img is None:
            a.axis("off")
            continue
        a.imshow(img, cmap="gray")
        a.set_title(title)
        a.set_xticks([])
        a.set_yticks([])
    f = np.asarray(fractions, dtype=float)
    ax[3].plot(f, ssims, "o-", label="SSIM")
    ax[3].set_xlabel("sampled fraction")
    ax[3].set_ylabel("SSIM")
    twin = ax[3].twinx()
    twin.plot(f, psnrs, "s--", color="tab:orange", label="PSNR")
    twin.set_ylabel("PSNR (dB)")
    _save(fig, path)


def plot_sweep(path, rows: List[Dict]) -> None:
    """Median SSIM and PSNR against acceleration factor."""
    acc = np.array([r["acceleration"] for r in rows], dtype=float)
    order = np.argsort(acc)
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    for a, key, label in ((ax[0], "median_ssim", "median SSIM"), (ax[1], "median_psnr", "median PSNR (dB)")):
        a.plot(acc[order], np.array([rows[i][key] for i in order], dtype=float), "o-")
        a.set_xlabel("acceleration (1 / fraction)")
        a.set_ylabel(label)
    _save(fig, path)


def plot_comparison(path, deltas: Sequence[float], labels: Optional[Sequence[str]] = None) -> None:
    """Per-seed paired SSIM differences, optimized minus random."""
    d = np.asarray(deltas, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.bar(np.arange(d.size), d, color=np.where(d >= 0, "tab:green", "tab:red"))
    ax.axhline(np.median(d), color="k", ls="--", label=f"median {np.median(d):+.4f}")
    ax.set_xticks(np.arange(d.size))
    ax.set_xticklabels(labels if labels is not None else [str(i) for i in range(d.size)])
    ax.set_xlabel("seed")
    ax.set_ylabel("SSIM delta")
    ax.legend()
    _save(fig, path)


def plot_losses(path, losses, smoothed=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(losses, alpha=0.3, lw=0.5, label="batch loss")
    if smoothed is not None:
        ax.plot(np.arange(len(smoothed)) + len(losses) - len(smoothed), smoothed, label="moving average")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    _save(fig, path)
