"""Zero-reference training losses."""

from __future__ import annotations

import logging

import numpy as np

from .factorize import FactorStack
from .image import LUMA_COEFFS, as_array

logger = logging.getLogger(__name__)

LOSS_NAMES = ("L_f", "L_c", "L_e", "L_s")


def loss_factorization(stack: FactorStack) -> float:
    """Energy-ratio loss ``sum_k |mean(E^k)/mean(X^k) - nu^k|``, averaged over channels.

    Uses the factors before residual absorption.  A recursion input with zero
    mean contributes ``nu^k``.
    """
    e = stack.e_raw()
    k, h, w, c = e.shape
    nu = stack.nu
    num = e.reshape(k, h * w, c).sum(axis=1) / (h * w)
    den = stack.inputs.reshape(k, h * w, c).sum(axis=1) / (h * w)
    total = 0.0
    for ch in range(c):
        for i in range(k):
            if abs(den[i, ch]) <= 1e-12:
                logger.warning("factor %d channel %d: recursion input has zero mean", i + 1, ch)
                total += nu[i]
            else:
                total += abs(num[i, ch] / den[i, ch] - nu[i])
    return float(total / c)


def factor_ratio_term(e: np.ndarray, x: np.ndarray, nu: float) -> float:
    """One ``|mean(E)/mean(X) - nu|`` term for a single channel."""
    den = float(x.sum() / x.size)
    if abs(den) <= 1e-12:
        return float(nu)
    return abs(float(e.sum() / e.size) / den - nu)


def loss_color(o) -> float:
    """Gray-world loss over the channel pairs (r,g), (g,b), (b,r)."""
    arr = as_array(o)
    if arr.shape[2] != 3:
        raise ValueError("color loss needs a 3-channel image")
    m = arr.astype(np.float64).reshape(-1, 3).mean(axis=0)
    return float((m[0] - m[1]) ** 2 + (m[1] - m[2]) ** 2 + (m[2] - m[0]) ** 2)


def _tile_means(y: np.ndarray, window: int) -> np.ndarray:
    h, w = y.shape
    rows = np.arange(0, h, window)
    cols = np.arange(0, w, window)
    sums = np.add.reduceat(np.add.reduceat(y, rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    return sums / counts


def loss_exposure(o, target: float = 0.6, window: int = 16) -> float:
    """Mean squared deviation of ``window x window`` tile luma means from ``target``.

    Tiles do not overlap; ragged edge tiles average over the pixels they have.
    """
    if window < 1:
        raise ValueError("exposure window must be >= 1")
    arr = as_array(o).astype(np.float64)
    if arr.shape[2] == 3:
        r, g, b = LUMA_COEFFS["analog"]
        y = r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]
    else:
        y = arr[:, :, 0]
    tiles = _tile_means(y, window)
    return float(np.mean((tiles - target) ** 2))


def loss_smooth(o) -> float:
    """Mean of squared forward differences in x and y (zero past the last row/column)."""
    arr = as_array(o).astype(np.float64)
    h, w, c = arr.shape
    if h < 2 or w < 2:
        raise ValueError("smoothness loss needs at least 2x2 pixels")
    gx = np.diff(arr, axis=1)
    gy = np.diff(arr, axis=0)
    return float((np.sum(gx * gx) + np.sum(gy * gy)) / (h * w * c))


def loss_total(parts, weights) -> float:
    """``lambda_f L_f + lambda_c L_c + lambda_e L_e + lambda_s L_s``."""
    parts = np.asarray(parts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if parts.shape != (4,) or weights.shape != (4,):
        raise ValueError("loss_total takes four parts and four weights")
    return float(np.dot(weights, parts))
