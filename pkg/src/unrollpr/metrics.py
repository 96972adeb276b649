"""Reconstruction quality metrics for [0,1]-normalized grayscale images."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x, ref):
    """10*log10(1 / MSE) in dB, dynamic range 1.0; +inf for exact equality."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch %r vs %r" % (x.shape, ref.shape))
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2D Gaussian tap matrix."""
    r = np.arange(size) - (size - 1) / 2.0
    g1 = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g = np.outer(g1, g1)
    return g / g.sum()


def _filter_valid(img, kernel):
    k = kernel.shape[0]
    win = sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", win, kernel, optimize=True)


def ssim(x, ref):
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, valid windowing.

    Standard constants K1=0.01, K2=0.03 at dynamic range 1.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch %r vs %r" % (x.shape, ref.shape))
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(
            "images must be at least %dx%d, got %r" % (SSIM_WINDOW, SSIM_WINDOW, x.shape)
        )
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    w = gaussian_window()
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(ref, w)
    var_x = _filter_valid(x * x, w) - mu_x ** 2
    var_y = _filter_valid(ref * ref, w) - mu_y ** 2
    cov = _filter_valid(x * ref, w) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
