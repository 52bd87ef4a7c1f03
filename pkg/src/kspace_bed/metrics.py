"""Reconstruction and segmentation quality: PSNR, SSIM and Dice.

SSIM follows the fastMRI convention: uniform 7x7 window, ``k1 = 0.01``,
``k2 = 0.03``, sample covariances, averaged over fully contained windows.
Values are on the 0-1 scale (multiply by 100 for the percentage display).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    dice: Optional[float] = None

    def as_row(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "dice": self.dice}


def _pair(reference, estimate):
    ref = np.asarray(reference, dtype=float)
    est = np.asarray(estimate, dtype=float)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    return ref, est


def psnr(reference, estimate) -> float:
    """``10 log10(max(reference)^2 / MSE)``; ``inf`` when the images agree.

    Not symmetric: the reference sets the peak.
    """
    ref, est = _pair(reference, estimate)
    if not np.any(ref):
        raise ValueError("reference image is identically zero")
    mse = np.mean((ref - est) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(ref.max() ** 2 / mse))


def ssim(
    reference,
    estimate,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: Optional[float] = None,
) -> float:
    """Mean structural similarity over all valid ``window x window`` patches.

    ``data_range`` defaults to ``max - min`` of the reference (``1.0`` when the
    reference is constant). Pass ``"pair"`` to use the range of both images,
    which makes the metric symmetric.
    """
    ref, est = _pair(reference, estimate)
    if ref.ndim != 2 or min(ref.shape) < window:
        raise ValueError(f"images must be 2D and at least {window}x{window}")
    if data_range is None:
        data_range = ref.max() - ref.min()
    elif data_range == "pair":
        both = np.concatenate([ref.ravel(), est.ravel()])
        data_range = both.max() - both.min()
    if data_range == 0:
        data_range = 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    npix = window * window
    cov_norm = npix / (npix - 1)

    wx = sliding_window_view(ref, (window, window))
    wy = sliding_window_view(est, (window, window))
    ux = wx.mean(axis=(-1, -2))
    uy = wy.mean(axis=(-1, -2))
    vx = cov_norm * (np.mean(wx * wx, axis=(-1, -2)) - ux * ux)
    vy = cov_norm * (np.mean(wy * wy, axis=(-1, -2)) - uy * uy)
    vxy = cov_norm * (np.mean(wx * wy, axis=(-1, -2)) - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux**2 + uy**2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def dice(reference_mask, estimate_mask) -> float:
    """``2 TP / (2 TP + FP + FN)`` on the positive class; 1.0 when both are empty."""
    ref, est = _pair(reference_mask, estimate_mask)
    ref = ref.astype(bool)
    est = est.astype(bool)
    tp = np.sum(ref & est)
    fp = np.sum(~ref & est)
    fn = np.sum(ref & ~est)
    den = 2 * tp + fp + fn
    if den == 0:
        return 1.0
    return float(2 * tp / den)


def evaluate(
    reference_image,
    estimate_image,
    reference_segmentation=None,
    estimate_segmentation=None,
    threshold: float = 0.5,
) -> MetricReport:
    """Metrics on image magnitudes; segmentations are thresholded before Dice."""
    ref = np.abs(np.asarray(reference_image))
    est = np.abs(np.asarray(estimate_image))
    d = None
    if reference_segmentation is not None and estimate_segmentation is not None:
        d = dice(
            np.asarray(reference_segmentation) > threshold,
            np.asarray(estimate_segmentation) > threshold,
        )
    return MetricReport(psnr(ref, est), ssim(ref, est), d)
