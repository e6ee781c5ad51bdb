"""Reference image-quality metrics: PSNR and single-scale SSIM.

Both operate on float images in [0, 1]. SSIM follows the classic windowed
construction: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic
range 1.0, grayscale via Rec.709 luma, averaged over valid window positions.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 99.0
_MSE_FLOOR = 1e-10

REC709_LUMA = np.array([0.2126, 0.7152, 0.0722])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: image shapes differ, {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB, capped at 99 dB for near-identical images."""
    a, b = _check_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ REC709_LUMA
    raise ValueError(f"to_luma: expected HxW or HxWx3 image, got shape {img.shape}")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean single-scale SSIM over valid window positions; in [-1, 1]."""
    a, b = _check_pair(a, b, "ssim")
    x = to_luma(a)
    y = to_luma(b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid")
    yy = convolve2d(y * y, w, mode="valid")
    xy = convolve2d(x * y, w, mode="valid")
    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
