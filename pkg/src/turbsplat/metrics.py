"""Full-reference (PSNR, SSIM) and no-reference (gradient contrast) metrics.

All metrics operate on unit-interval Image data. PSNR is capped at 99 dB so
identical inputs stay CSV-friendly. SSIM is the standard single-scale form:
11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, averaged over
window positions fully inside the image. The sharpness score is the mean
Sobel gradient magnitude over interior pixels; BRISQUE is intentionally not
provided (it needs a trained natural-scene-statistics model).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate, sobel

from .errors import UsageError
from .imgcore import Image

PSNR_CAP = 99.0

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _check_pair(a: Image, b: Image) -> None:
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels):
        raise UsageError(
            f"image shapes differ: {a.data.shape} vs {b.data.shape}"
        )


def psnr(a: Image, b: Image) -> float:
    """10 log10(1 / MSE) on unit-range data, capped at 99 dB."""
    _check_pair(a, b)
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _ssim_window() -> np.ndarray:
    x = np.arange(-5, 6, dtype=np.float64)
    g = np.exp(-0.5 * (x / 1.5) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_WIN = _ssim_window()


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    def valid(m: np.ndarray) -> np.ndarray:
        return correlate(m, _WIN, mode="nearest")[5:-5, 5:-5]

    mu_x = valid(x)
    mu_y = valid(y)
    var_x = valid(x * x) - mu_x * mu_x
    var_y = valid(y * y) - mu_y * mu_y
    cov = valid(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: Image, b: Image) -> float:
    """Mean structural similarity; 1.0 exactly for identical inputs."""
    _check_pair(a, b)
    if min(a.height, a.width) < 11:
        raise UsageError(f"images must be at least 11x11 for SSIM, got {a.width}x{a.height}")
    scores = [
        _ssim_plane(a.data[:, :, ch].astype(np.float64),
                    b.data[:, :, ch].astype(np.float64))
        for ch in range(a.channels)
    ]
    return float(np.mean(scores))


def gcl(a: Image) -> float:
    """Mean Sobel gradient magnitude over interior pixels (sharpness score)."""
    if min(a.height, a.width) < 3:
        raise UsageError(f"image must be at least 3x3, got {a.width}x{a.height}")
    plane = a.gray()
    gx = sobel(plane, axis=1, mode="nearest")
    gy = sobel(plane, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)[1:-1, 1:-1]
    return float(mag.mean())
