"""Image quality metrics: PSNR and Gaussian-windowed SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Returned by psnr() for identical images.
PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; :data:`PSNR_IDENTICAL` when ``a == b``."""
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(max_value * max_value / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only windows fully inside the image."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, max_value: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("SSIM expects 2-D images")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, max_value: float = 1.0) -> float:
    """Mean structural similarity over all valid 11x11 Gaussian windows (sigma 1.5)."""
    return float(np.mean(ssim_map(a, b, max_value)))


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    count: int
    identical: int = 0  # pairs excluded from the PSNR mean

    def csv_line(self) -> str:
        return f"{self.count},{self.psnr_db:.6f},{self.ssim:.6f}"


def evaluate(pairs: Iterable[tuple[np.ndarray, np.ndarray]], max_value: float = 1.0) -> QualityReport:
    """Average PSNR and SSIM over ``(restored, reference)`` pairs."""
    psnrs, ssims = [], []
    identical = 0
    for restored, reference in pairs:
        p = psnr(restored, reference, max_value)
        if math.isinf(p):
            identical += 1
        else:
            psnrs.append(p)
        ssims.append(ssim(restored, reference, max_value))
    if not ssims:
        raise ValueError("evaluate needs at least one image pair")
    mean_psnr = float(np.mean(psnrs)) if psnrs else PSNR_IDENTICAL
    return QualityReport(mean_psnr, float(np.mean(ssims)), len(ssims), identical)
