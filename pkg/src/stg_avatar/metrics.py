"""PSNR and Gaussian-window SSIM, with the SSIM gradient used by the RGB loss."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filt(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid-mode separable correlation over the two leading axes."""
    r = (len(w) - 1) // 2
    y = correlate1d(x, w, axis=0, mode="constant")
    y = correlate1d(y, w, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def _filt_T(g: np.ndarray, w: np.ndarray, shape) -> np.ndarray:
    """Adjoint of ``_filt`` (the window is symmetric)."""
    r = (len(w) - 1) // 2
    full = np.zeros(shape)
    full[r:shape[0] - r, r:shape[1] - r] = g
    y = correlate1d(full, w, axis=0, mode="constant")
    return correlate1d(y, w, axis=1, mode="constant")


def _ssim_terms(x, y, w):
    mx, my = _filt(x, w), _filt(y, w)
    sxx = _filt(x * x, w) - mx * mx
    syy = _filt(y * y, w) - my * my
    sxy = _filt(x * y, w) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sxx + syy + C2
    return mx, my, A1, A2, B1, B2


def ssim(a, b, with_grad: bool = False):
    """Mean local SSIM per channel, averaged over channels.

    With ``with_grad`` returns (ssim, d ssim / d a).
    """
    a, b = _check(a, b)
    flat = a.ndim == 2
    if flat:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    w = gaussian_window()
    vals = []
    grad = np.zeros_like(a) if with_grad else None
    nch = a.shape[2]
    for c in range(nch):
        x, y = a[..., c], b[..., c]
        mx, my, A1, A2, B1, B2 = _ssim_terms(x, y, w)
        smap = (A1 * A2) / (B1 * B2)
        vals.append(smap.mean())
        if with_grad:
            P = smap.size * nch
            # partials of the SSIM map wrt the local statistics
            d_mx = (2 * my * A2 / (B1 * B2) - 2 * mx * smap / B1) / P
            d_sxx = -smap / B2 / P
            d_sxy = 2 * A1 / (B1 * B2) / P
            # mu_x = K x; sxx = K(x^2) - mu_x^2; sxy = K(xy) - mu_x mu_y
            g_mx = d_mx - 2 * mx * d_sxx - my * d_sxy
            grad[..., c] = (_filt_T(g_mx, w, x.shape) + 2 * x * _filt_T(d_sxx, w, x.shape)
                            + y * _filt_T(d_sxy, w, x.shape))
    val = float(np.mean(vals))
    if with_grad:
        return val, grad[..., 0] if flat else grad
    return val
