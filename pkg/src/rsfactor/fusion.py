"""Network-free fusion of a FactorStack into an enhanced image."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .factorize import FactorStack, ParamVector, factorize
from .image import Image, as_array

FUSION_MODES = ("running_average", "curve")


@dataclass(frozen=True)
class BilateralConfig:
    window: int = 5
    sigma_color: float = 0.5
    sigma_space: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"bilateral window must be odd and >= 1, got {self.window}")
        if self.sigma_color <= 0 or self.sigma_space <= 0:
            raise ValueError("bilateral sigmas must be positive")


@dataclass(frozen=True)
class FusionConfig:
    """Fusion settings for ``K`` factors.

    ``factor_weights`` scale ``F^1..F^K`` before fusion and ``image_weight``
    scales the input image slot (the leading entry of a ``K+1`` weight
    vector such as ``[1, 4, 4, 4, 4, 4]``).  ``gammas`` are the per-factor
    curve coefficients used by ``mode="curve"``.
    """

    factor_weights: tuple[float, ...]
    gammas: tuple[float, ...]
    image_weight: float = 1.0
    bilateral: BilateralConfig = field(default_factory=BilateralConfig)
    mode: str = "curve"
    curve_variant: str = "iterated"

    def __post_init__(self):
        object.__setattr__(self, "factor_weights", tuple(float(w) for w in self.factor_weights))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if len(self.factor_weights) != len(self.gammas):
            raise ValueError("factor_weights and gammas must both have K entries")
        if min(self.factor_weights, default=0.0) < 0 or self.image_weight < 0:
            raise ValueError("factor weights must be non-negative")
        if not all(np.isfinite(self.gammas)):
            raise ValueError("gammas must be finite")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.curve_variant not in ("iterated", "literal"):
            raise ValueError(f"unknown curve variant {self.curve_variant!r}")

    @property
    def k_factors(self) -> int:
        return len(self.gammas)

    @classmethod
    def default(cls, k_factors: int, **kwargs) -> FusionConfig:
        return cls((1.0,) * k_factors, (0.0,) * k_factors, **kwargs)

    def with_weights(self, weights) -> FusionConfig:
        """Accept ``K`` factor weights or ``K+1`` with the image weight first."""
        weights = [float(w) for w in weights]
        k = self.k_factors
        if len(weights) == k + 1:
            return replace(self, image_weight=weights[0], factor_weights=tuple(weights[1:]))
        if len(weights) == k:
            return replace(self, factor_weights=tuple(weights))
        raise ValueError(f"expected {k} or {k + 1} weights for K={k}, got {len(weights)}")

    def with_gammas(self, gammas) -> FusionConfig:
        return replace(self, gammas=tuple(float(g) for g in gammas))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "curve_variant": self.curve_variant,
            "image_weight": self.image_weight,
            "factor_weights": list(self.factor_weights),
            "gammas": list(self.gammas),
            "bilateral": {
                "window": self.bilateral.window,
                "sigma_color": self.bilateral.sigma_color,
                "sigma_space": self.bilateral.sigma_space,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> FusionConfig:
        return cls(
            factor_weights=d["factor_weights"],
            gammas=d["gammas"],
            image_weight=d.get("image_weight", 1.0),
            bilateral=BilateralConfig(**d.get("bilateral", {})),
            mode=d.get("mode", "curve"),
            curve_variant=d.get("curve_variant", "iterated"),
        )


def running_average_weights(f: np.ndarray) -> np.ndarray:
    """``w^k = mean(F^k) / sum_j mean(F^j)``, renormalized to sum to one.

    Falls back to the means of ``|F^k|`` when any factor mean is not
    positive, so the weights always form a convex combination.
    """
    k = f.shape[0]
    means = f.reshape(k, -1).mean(axis=1)
    if np.any(means <= 0):
        means = np.abs(f).reshape(k, -1).mean(axis=1)
    total = means.sum()
    if not total > 0:
        raise ValueError("degenerate factor stack: factor means sum to zero")
    w = means / total
    return w / w.sum()


def fuse_running_average(img, stack: FactorStack, f: np.ndarray | None = None,
                         image_weight: float = 1.0, clamp: bool = True) -> np.ndarray:
    """``O^{k+1} = (1 - w^k) O^k + w^k F^k`` starting from ``O^0 = image``.

    ``f`` replaces ``stack.f`` (e.g. weighted difference maps).
    """
    f = stack.f if f is None else f
    base = as_array(img).astype(np.float64)
    if f.shape[1:] != base.shape:
        raise ValueError(f"factor stack shape {f.shape[1:]} does not match image {base.shape}")
    w = running_average_weights(f)
    out = image_weight * base
    for k in range(f.shape[0]):
        out = (1.0 - w[k]) * out + w[k] * f[k]
    return np.clip(out, 0.0, 1.0) if clamp else out


def factor_masks(f: np.ndarray) -> np.ndarray:
    """``|F^k|`` divided by its own maximum (all-zero factors give zero masks)."""
    mag = np.abs(f)
    peak = mag.reshape(mag.shape[0], -1).max(axis=1)
    safe = np.where(peak > 0, peak, 1.0)
    return mag / safe[:, None, None, None]


def curve_adjust(img, stack: FactorStack, gammas, f: np.ndarray | None = None,
                 image_weight: float = 1.0, variant: str = "iterated") -> np.ndarray:
    """Masked quadratic curves ``O <- O + r^k M^k (O^2 - O)``, clamped to [0, 1].

    ``iterated`` applies the K curves one after another; ``literal`` sums the
    K single-curve images instead.  The per-pixel coefficient ``r^k M^k`` is
    clipped to [-1, 1], the range in which each curve is a monotone map of
    [0, 1] onto itself.
    """
    f = stack.f if f is None else f
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas.shape != (f.shape[0],):
        raise ValueError(f"need {f.shape[0]} gammas, got {gammas.shape}")
    base = image_weight * as_array(img).astype(np.float64)
    if f.shape[1:] != base.shape:
        raise ValueError(f"factor stack shape {f.shape[1:]} does not match image {base.shape}")
    masks = factor_masks(f)
    if variant == "literal":
        out = np.zeros_like(base)
        for k in range(f.shape[0]):
            coeff = np.clip(gammas[k] * masks[k], -1.0, 1.0)
            out += base + coeff * (base * base - base)
        return np.clip(out, 0.0, 1.0)
    out = base
    for k in range(f.shape[0]):
        if gammas[k] == 0.0:
            continue
        coeff = np.clip(gammas[k] * masks[k], -1.0, 1.0)
        out = out + coeff * (out * out - out)
    return np.clip(out, 0.0, 1.0)


def bilateral_filter(img, window: int = 5, sigma_color: float = 0.5, sigma_space: float = 1.0) -> np.ndarray:
    """Per-channel bilateral filter with replicate padding.

    Weights are ``exp(-(dy^2+dx^2) / 2 sigma_space^2) * exp(-(I_q - I_p)^2 / 2 sigma_color^2)``,
    normalized over the ``window x window`` neighbourhood.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    arr = as_array(img).astype(np.float64)
    if window == 1:
        return arr.copy()
    r = window // 2
    h, w = arr.shape[:2]
    padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="edge")
    num = np.zeros_like(arr)
    den = np.zeros_like(arr)
    inv_c = -0.5 / (sigma_color * sigma_color)
    inv_s = -0.5 / (sigma_space * sigma_space)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            diff = nb - arr
            wgt = np.exp(inv_s * (dy * dy + dx * dx) + inv_c * diff * diff)
            num += wgt * nb
            den += wgt
    return num / den


def fuse(img, stack: FactorStack, fcfg: FusionConfig) -> np.ndarray:
    """Weighted fusion + bilateral filter, clamped to [0, 1]."""
    weights = np.asarray(fcfg.factor_weights, dtype=np.float64)
    if weights.shape[0] != stack.k_factors:
        raise ValueError(f"fusion config has {weights.shape[0]} weights for K={stack.k_factors}")
    f = stack.f * weights[:, None, None, None]
    if fcfg.mode == "running_average":
        fused = fuse_running_average(img, stack, f, fcfg.image_weight)
    else:
        fused = curve_adjust(img, stack, fcfg.gammas, f, fcfg.image_weight, fcfg.curve_variant)
    b = fcfg.bilateral
    out = bilateral_filter(fused, b.window, b.sigma_color, b.sigma_space)
    return np.clip(out, 0.0, 1.0)


def enhance(img, params: ParamVector, fcfg: FusionConfig) -> Image:
    """Factorize, fuse and denoise one image."""
    stack = factorize(img, params)
    return Image(fuse(img, stack, fcfg).astype(np.float32))
