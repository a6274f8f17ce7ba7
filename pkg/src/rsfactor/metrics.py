"""Full-reference quality metrics: PSNR, luma PSNR, SSIM and MSE."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .image import as_array, luma_array

DEFAULT_LUMA = "analog"
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EVAL_FIELDS = ("name", "psnr_y", "psnr_c", "ssim_y", "mse")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = as_array(pred).astype(np.float64)
    b = as_array(gt).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return float(np.mean((a - b) ** 2))


def psnr(pred, gt, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` with the MSE pooled over all channels.

    Identical inputs return ``math.inf``.
    """
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(pred, gt)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / err))


def psnr_y(pred, gt, convention: str = DEFAULT_LUMA, peak: float = 1.0) -> float:
    """PSNR on the luma channel of two RGB images."""
    a, b = _pair(pred, gt)
    return psnr(luma_array(a, convention)[:, :, None], luma_array(b, convention)[:, :, None], peak)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(m: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = k.size // 2
    out = correlate1d(correlate1d(m, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out


def ssim_map(x, y, peak: float = 1.0) -> np.ndarray:
    """SSIM map of two single-channel arrays over the fully-covered (valid) region."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    k = _gaussian_kernel()
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, gt, convention: str = DEFAULT_LUMA, peak: float = 1.0) -> float:
    """Single-scale SSIM on luma (or on the only channel of a gray image)."""
    a, b = _pair(pred, gt)
    if a.shape[2] == 3:
        a = luma_array(a, convention)[:, :, None]
        b = luma_array(b, convention)[:, :, None]
    return float(np.mean(ssim_map(a[:, :, 0], b[:, :, 0], peak)))


@dataclass(frozen=True)
class MetricReport:
    psnr_y: float
    psnr_c: float
    ssim_y: float
    mse: float
    luma_convention: str = DEFAULT_LUMA

    def row(self, name: str) -> dict:
        return {"name": name, "psnr_y": self.psnr_y, "psnr_c": self.psnr_c,
                "ssim_y": self.ssim_y, "mse": self.mse}


def evaluate(pred, gt, convention: str = DEFAULT_LUMA) -> MetricReport:
    a, b = _pair(pred, gt)
    if a.shape[2] == 3:
        py = psnr_y(a, b, convention)
    else:
        py = psnr(a, b)
    return MetricReport(py, psnr(a, b), ssim(a, b, convention), mse(a, b), convention)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Arithmetic mean of each field (an ``inf`` PSNR keeps the mean at ``inf``)."""
    if not reports:
        raise ValueError("no reports to average")
    conv = reports[0].luma_convention
    return MetricReport(
        float(np.mean([r.psnr_y for r in reports])),
        float(np.mean([r.psnr_c for r in reports])),
        float(np.mean([r.ssim_y for r in reports])),
        float(np.mean([r.mse for r in reports])),
        conv,
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def eval_csv(named: list[tuple[str, MetricReport]]) -> str:
    """Per-image rows followed by a final ``mean`` row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_FIELDS)
    rows = [r.row(n) for n, r in named]
    if named:
        rows.append(mean_report([r for _, r in named]).row("mean"))
    for row in rows:
        writer.writerow([_fmt(row[f]) for f in EVAL_FIELDS])
    return buf.getvalue()

