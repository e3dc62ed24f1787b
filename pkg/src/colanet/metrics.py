"""PSNR and SSIM image-quality metrics.

PSNR is 10 log10(peak^2 / MSE) in dB with +inf for identical images.  SSIM
is the single-scale index with an 11x11 Gaussian window (sigma 1.5), the
usual C1 = (0.01 peak)^2 / C2 = (0.03 peak)^2 stabilizers and valid borders
(no padding).  For 3-channel inputs PSNR pools all channels jointly and SSIM
is evaluated on the luma channel (ITU-R 601 weights).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

_LUMA = np.array([0.299, 0.587, 0.114])


def _as_plane(img):
    arr = np.asarray(img, dtype=np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise ShapeError(f"expected 1 or 3 channels, got {arr.shape[0]}")
        arr = np.tensordot(_LUMA, arr, axes=(0, 0))
    if arr.ndim != 2:
        raise ShapeError(f"cannot interpret shape {arr.shape} as an image")
    return arr


def psnr(a, b, peak=255.0):
    """Peak signal-to-noise ratio in dB; math.inf when the images match."""
    if peak <= 0:
        raise ConfigError("peak must be positive")
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


_WINDOW = _gaussian_window()


def _filter_valid(img, kernel):
    size = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b, peak=255.0):
    """Mean structural similarity over all valid 11x11 window positions."""
    if peak <= 0:
        raise ConfigError("peak must be positive")
    x = _as_plane(a)
    y = _as_plane(b)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ShapeError("image smaller than the 11x11 SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x = _filter_valid(x, _WINDOW)
    mu_y = _filter_valid(y, _WINDOW)
    sxx = _filter_valid(x * x, _WINDOW) - mu_x * mu_x
    syy = _filter_valid(y * y, _WINDOW) - mu_y * mu_y
    sxy = _filter_valid(x * y, _WINDOW) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM values plus their arithmetic means."""

    names: list
    psnr_db: list
    ssim: list

    @property
    def mean_psnr(self):
        return sum(self.psnr_db) / len(self.psnr_db)

    @property
    def mean_ssim(self):
        return sum(self.ssim) / len(self.ssim)


def evaluate_pairs(pairs, peak=255.0):
    """Score (name, reference, test) triples into a MetricReport."""
    names, ps, ss = [], [], []
    for name, ref, test in pairs:
        names.append(name)
        ps.append(psnr(ref, test, peak))
        ss.append(ssim(ref, test, peak))
    if not names:
        raise ConfigError("no image pairs to evaluate")
    return MetricReport(names, ps, ss)
