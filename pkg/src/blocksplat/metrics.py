"""SSIM / PSNR on [0,1] images."""
import numpy as np
from scipy.ndimage import gaussian_filter

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim_map(a, b):
    """Per-pixel, per-channel SSIM over the region where the 11x11 window fits."""
    a, b = _check(a, b)
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise ValueError(f"SSIM needs at least {WINDOW}x{WINDOW} pixels, got {a.shape[:2]}")
    pad = WINDOW // 2
    trunc = pad / SIGMA

    def blur(x):
        return gaussian_filter(x, sigma=(SIGMA, SIGMA, 0), truncate=trunc, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (saa + sbb + C2)
    return (num / den)[pad:-pad, pad:-pad]


def ssim(a, b) -> float:
    """Mean SSIM over channels, Gaussian window (11, sigma 1.5)."""
    return float(np.clip(ssim_map(a, b).mean(), -1.0, 1.0))


def psnr(a, b) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
