"""Image quality metrics: PSNR and windowed SSIM (with an analytic gradient for training)."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


class ImageSizeError(ValueError):
    pass


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImageSizeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = gaussian_taps(size, sigma)
    return np.outer(g, g)


def _filter_valid(stack, g):
    """Separable windowed mean over axes 1 and 2, keeping valid positions only."""
    r = (g.size - 1) // 2
    out = correlate1d(stack, g, axis=1, mode="constant")
    out = correlate1d(out, g, axis=2, mode="constant")
    return out[:, r:-r, r:-r]


def _filter_full(stack, g, shape):
    """Adjoint of :func:`_filter_valid` (zero-pad then filter; the taps are symmetric)."""
    r = (g.size - 1) // 2
    pad = np.zeros(stack.shape[:1] + shape)
    pad[:, r:-r, r:-r] = stack
    out = correlate1d(pad, g, axis=1, mode="constant")
    return correlate1d(out, g, axis=2, mode="constant")


def _as_channels(img):
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b, with_grad: bool = False):
    """Mean SSIM over valid 11x11 Gaussian-window positions and channels.

    With ``with_grad`` also returns d ssim / d a (the gradient w.r.t. the first argument).
    """
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as_channels(a), _as_channels(b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ImageSizeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    g = gaussian_taps()
    mx, my, exx, eyy, exy = _filter_valid(np.stack([a, b, a * a, b * b, a * b]), g)
    a1 = 2 * mx * my + C1
    a2 = 2 * (exy - mx * my) + C2
    b1 = mx * mx + my * my + C1
    b2 = (exx - mx * mx) + (eyy - my * my) + C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not with_grad:
        return value
    n = smap.size
    inv = 1.0 / (b1 * b2)
    d_mx = (2 * my * a2 - 2 * my * a1) * inv - smap * (2 * mx / b1 - 2 * mx / b2)
    d_exx = -smap / b2
    d_exy = 2 * a1 * inv
    g_mx, g_exx, g_exy = _filter_full(np.stack([d_mx, d_exx, d_exy]) / n, g, a.shape)
    grad = g_mx + 2 * a * g_exx + b * g_exy
    return value, grad.reshape(shape)
