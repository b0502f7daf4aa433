"""Image quality metrics on [0, 1] images."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03, window: int = 11,
         sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels.

    Border pixels closer than half a window to the edge are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _gaussian(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    pad = (window - 1) // 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, k), _blur(y, k)
        sxx = _blur(x * x, k) - mx * mx
        syy = _blur(y * y, k) - my * my
        sxy = _blur(x * y, k) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(scores))
