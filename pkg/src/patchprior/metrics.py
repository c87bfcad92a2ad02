"""Image quality metrics on [0, 1] images."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0


def psnr(estimate: np.ndarray, reference: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical images."""
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse))


def _filter(x: np.ndarray, sigma: float) -> np.ndarray:
    # Gaussian window truncated at 3.5 sigma (an 11x11 window at sigma 1.5)
    return ndimage.gaussian_filter(x, sigma, truncate=3.5, mode="reflect")


def ssim(estimate: np.ndarray, reference: np.ndarray, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window; channels are averaged.

    Accepts (H, W) or (C, H, W).  Pixels within the window radius of the
    border are excluded from the mean.
    """
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    pad = int(3.5 * sigma + 0.5)
    vals = []
    for ac, bc in zip(a, b):
        mu_a, mu_b = _filter(ac, sigma), _filter(bc, sigma)
        va = _filter(ac * ac, sigma) - mu_a**2
        vb = _filter(bc * bc, sigma) - mu_b**2
        cov = _filter(ac * bc, sigma) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
        vals.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))
