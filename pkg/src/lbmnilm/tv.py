"""Exact 1-D total-variation denoising (Condat's direct algorithm)."""

from __future__ import annotations

import numpy as np


def tv_denoise(y, lam: float) -> np.ndarray:
    """argmin_x 1/2 |y - x|^2 + lam * sum_t |x[t+1] - x[t]|.

    Runs in O(n) typical time without iterating to a tolerance, so the
    result is exact up to rounding.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if n < 2 or lam == 0:
        return y.copy()
    x = np.empty(n)
    k = k0 = kplus = kminus = 0
    vmin, vmax = y[0] - lam, y[0] + lam
    umin, umax = lam, -lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                x[k0:kminus + 1] = vmin
                k0 = kminus + 1
                k = kminus = k0
                vmin = y[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                x[k0:kplus + 1] = vmax
                k0 = kplus + 1
                k = kplus = k0
                vmax = y[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                x[k0:k + 1] = vmin
                return x
        umin += y[k + 1] - vmin
        if umin < -lam:
            x[k0:kminus + 1] = vmin
            k0 = kminus + 1
            k = kminus = kplus = k0
            vmin = y[k]
            vmax = vmin + 2 * lam
            umin, umax = lam, -lam
            continue
        umax += y[k + 1] - vmax
        if umax > lam:
            x[k0:kplus + 1] = vmax
            k0 = kplus + 1
            k = kminus = kplus = k0
            vmax = y[k]
            vmin = vmax - 2 * lam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def tv_denoise_nonneg(y, lam: float) -> np.ndarray:
    """TV denoising restricted to x >= 0.

    In one dimension the constrained minimiser is the clipped unconstrained
    one.
    """
    return np.maximum(tv_denoise(y, lam), 0.0)
