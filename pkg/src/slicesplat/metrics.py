"""PSNR and Gaussian-window SSIM (2-D images and 3-D volumes).

SSIM follows the usual definition with an 11-tap Gaussian window
(sigma = 1.5), reflect boundary handling, population (co)variances and the
mean taken over the region at least 5 samples from every border.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

WIN = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); ``math.inf`` when the inputs are identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window() -> np.ndarray:
    x = np.arange(WIN) - WIN // 2
    w = np.exp(-0.5 * (x / SIGMA) ** 2)
    return w / w.sum()


def _filter(x: np.ndarray) -> np.ndarray:
    w = gaussian_window()
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=axis, mode="reflect")
    return x


def _crop(x: np.ndarray) -> np.ndarray:
    p = WIN // 2
    return x[tuple(slice(p, n - p) for n in x.shape)]


def _ssim_terms(x, y, data_range, filt):
    C1 = (K1 * data_range) ** 2
    C2 = (K2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    vxy = filt(x * y) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * vxy + C2
    B1 = mx * mx + my * my + C1
    B2 = vx + vy + C2
    return mx, my, A1, A2, B1, B2


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM of two images or volumes of equal shape (every axis >= 11)."""
    a, b = _check_pair(a, b)
    if min(a.shape) < WIN:
        raise InvalidArgumentError(f"every axis must be >= {WIN} samples for SSIM, got {a.shape}")
    *_, A1, A2, B1, B2 = _ssim_terms(a, b, data_range, _filter)
    return float(np.mean(_crop(A1 * A2 / (B1 * B2))))


def _filter_matrix(n: int) -> np.ndarray:
    return ndimage.correlate1d(np.eye(n), gaussian_window(), axis=0, mode="reflect")


def ssim_with_grad(x, y, data_range: float = 1.0):
    """2-D SSIM(x, y) and its gradient w.r.t. ``x``.

    The reflect-boundary filter is applied as dense per-axis matrices so the
    adjoint is just the transpose.
    """
    x, y = _check_pair(x, y)
    if x.ndim != 2 or min(x.shape) < WIN:
        raise InvalidArgumentError(f"expected a 2-D image with sides >= {WIN}, got {x.shape}")
    Ky = _filter_matrix(x.shape[0])
    Kx = _filter_matrix(x.shape[1])
    filt = lambda z: Ky @ z @ Kx.T  # noqa: E731
    adj = lambda z: Ky.T @ z @ Kx  # noqa: E731
    mx, my, A1, A2, B1, B2 = _ssim_terms(x, y, data_range, filt)
    S = A1 * A2 / (B1 * B2)
    mask = np.zeros_like(S)
    p = WIN // 2
    mask[p:-p, p:-p] = 1.0
    n = mask.sum()
    g = mask / n
    dS_dmx = S * (2 * my / A1 - 2 * mx / B1)
    dS_dvx = -S / B2
    dS_dvxy = 2 * S / A2
    d_m1 = g * (dS_dmx - 2 * mx * dS_dvx - my * dS_dvxy)
    d_m2 = g * dS_dvx
    d_m12 = g * dS_dvxy
    grad = adj(d_m1) + 2 * x * adj(d_m2) + y * adj(d_m12)
    return float(np.sum(S * mask) / n), grad
