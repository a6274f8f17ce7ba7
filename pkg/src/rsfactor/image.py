"""Image container, channel views, luma conversion and basic statistics.

Images are stored as ``(H, W, C)`` float32 arrays (channel-interleaved,
row-major) with samples in ``[0, 1]``.  Single channels are handed to the
solvers as 2-D float64 arrays ("channel matrices"); every reduction below
accumulates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

LumaConvention = Literal["analog", "digital"]

# Y rows of the two RGB->YCbCr conventions (no offset term).
LUMA_COEFFS: dict[str, tuple[float, float, float]] = {
    "analog": (0.299, 0.587, 0.114),
    "digital": (0.2568, 0.5041, 0.0979),
}


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable ``H x W x C`` raster with samples in [0, 1].

    Parameters
    ----------
    data : array_like
        ``(H, W)`` or ``(H, W, C)`` array; a 2-D input becomes one channel.
    check : bool
        Validate finiteness and the [0, 1] range.  Disable only for
        intermediate results that are allowed to leave the range.
    """

    data: np.ndarray

    def __init__(self, data, check: bool = True):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W) or (H, W, 1|3) data, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image must be non-empty")
        if check:
            if not np.all(np.isfinite(arr)):
                raise ValueError("image contains non-finite samples")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("image samples must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, c: int) -> np.ndarray:
        """Return channel ``c`` as a float64 channel matrix (a copy)."""
        return self.data[:, :, c].astype(np.float64)

    def __repr__(self) -> str:
        return f"Image({self.height}x{self.width}x{self.channels})"


def as_array(img) -> np.ndarray:
    """Return the ``(H, W, C)`` array behind an Image or array-like."""
    if isinstance(img, Image):
        return img.data
    arr = np.asarray(img)
    return arr[:, :, None] if arr.ndim == 2 else arr


def mean(m) -> float:
    """Arithmetic mean of all entries, accumulated in float64."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean of an empty matrix")
    return float(arr.sum() / arr.size)


def rgb_to_luma(img, convention: LumaConvention = "analog") -> Image:
    """Luma (Y) plane of an RGB image.

    ``analog`` uses 0.299/0.587/0.114; ``digital`` uses the 0.2568/0.5041/0.0979
    row of the studio-swing matrix with no offset, so white maps to 0.8588.
    """
    return Image(luma_array(img, convention), check=False)


def luma_array(img, convention: LumaConvention = "analog") -> np.ndarray:
    """Float64 ``(H, W)`` luma plane; see :func:`rgb_to_luma`."""
    arr = as_array(img)
    if arr.shape[2] != 3:
        raise ValueError(f"luma needs 3 channels, got {arr.shape[2]}")
    try:
        r, g, b = LUMA_COEFFS[convention]
    except KeyError:
        raise ValueError(f"unknown luma convention {convention!r}") from None
    x = arr.astype(np.float64)
    return r * x[:, :, 0] + g * x[:, :, 1] + b * x[:, :, 2]


def spectral_norm(m, tol: float = 1e-6, max_iter: int = 5000) -> float:
    """Largest singular value by power iteration on ``m.T @ m``.

    Iterates until the eigen-residual ``||G v - lam v||`` drops below
    ``tol * lam``, which bounds the relative error of ``lam = sigma**2``.
    The start vector is fixed so the result is deterministic and exactly
    homogeneous in scalar multiples of ``m``.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.size == 0:
        raise ValueError("spectral norm of an empty matrix")
    if a.ndim != 2:
        raise ValueError("spectral norm needs a 2-D matrix")
    if not np.any(a):
        return 0.0
    # power-of-two rescale: avoids under/overflow without perturbing the mantissas
    _, exp = np.frexp(np.max(np.abs(a)))
    a = np.ldexp(a, -int(exp))
    if a.shape[0] < a.shape[1]:
        a = a.T
    v = np.random.default_rng(0).standard_normal(a.shape[1]) + 1.0
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = a.T @ (a @ v)
        lam = float(v @ w)
        if lam <= 0.0:
            # start vector in the null space; restart from a different one
            v = np.random.default_rng(1).standard_normal(a.shape[1])
            v /= np.linalg.norm(v)
            continue
        resid = np.linalg.norm(w - lam * v)
        nw = np.linalg.norm(w)
        v = w / nw
        if resid <= tol * lam:
            break
    return float(np.ldexp(np.sqrt(max(lam, 0.0)), int(exp)))


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))
