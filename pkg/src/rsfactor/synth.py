"""Seeded synthetic paired low-light data.

Well-lit scenes are piecewise-smooth: a shaded backdrop, a few flat-colored
rectangles and ellipses, soft cast shadows and small specular highlights.
The dark counterpart applies a gamma, a gain chosen to bring each channel
mean near ``target_mean`` and mild Gaussian noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .image import Image

logger = logging.getLogger(__name__)

DARK_MEAN_RANGE = (0.03, 0.08)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 128
    width: int = 128
    min_shapes: int = 3
    max_shapes: int = 7
    target_mean: float = 0.05
    gamma_range: tuple[float, float] = (1.6, 2.4)
    noise_sigma: float = 0.004


def _shape_mask(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = yy.shape
    cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
    ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def bright_scene(rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """One well-lit ``(H, W, 3)`` float64 scene in [0, 1]."""
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.35, 0.65, size=3)
    tilt = rng.uniform(-0.25, 0.25, size=2)
    shade = 1.0 + tilt[0] * (yy / h - 0.5) + tilt[1] * (xx / w - 0.5)
    img = shade[:, :, None] * base[None, None, :]
    light = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)])
    for _ in range(rng.integers(cfg.min_shapes, cfg.max_shapes + 1)):
        mask = _shape_mask(rng, yy, xx)
        # cast shadow: the shape's footprint shifted away from the light
        dy, dx = int(round(-light[0] * 0.15 * h)), int(round(-light[1] * 0.15 * w))
        shadow = gaussian_filter(np.roll(mask, (dy, dx), axis=(0, 1)).astype(np.float64), 3.0)
        img *= 1.0 - 0.45 * shadow[:, :, None]
        color = np.clip(base + rng.normal(0.0, 0.2, size=3), 0.1, 0.95)
        gloss = 1.0 + 0.3 * (light[0] * (yy / h - 0.5) + light[1] * (xx / w - 0.5))
        img = np.where(mask[:, :, None], color[None, None, :] * gloss[:, :, None], img)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(1.5, 4.0) * h / 128
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += rng.uniform(0.3, 0.6) * blob[:, :, None]
    img = gaussian_filter(img, sigma=(0.7, 0.7, 0))
    return np.clip(img, 0.0, 1.0)


def darken(rng: np.random.Generator, bright: np.ndarray, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Low-light version: ``gain * bright**gamma + noise``, channel means kept in range."""
    gamma = rng.uniform(*cfg.gamma_range)
    curved = bright**gamma
    gain = cfg.target_mean * rng.uniform(0.9, 1.1) / max(float(curved.mean()), 1e-6)
    dark = gain * curved
    lo, hi = DARK_MEAN_RANGE
    # nudge individual channels that a strong color cast pushed out of range
    means = dark.reshape(-1, 3).mean(axis=0)
    fix = np.clip(means, lo + 0.005, hi - 0.005) / np.maximum(means, 1e-9)
    dark = dark * fix[None, None, :]
    dark = dark + rng.normal(0.0, cfg.noise_sigma, size=dark.shape)
    return np.clip(dark, 0.0, 1.0)


def synth_pair(seed_seq, cfg: SynthConfig = SynthConfig()) -> tuple[Image, Image]:
    """``(low, high)`` for one seed or SeedSequence."""
    rng = np.random.default_rng(seed_seq)
    high = bright_scene(rng, cfg)
    low = darken(rng, high, cfg)
    return Image(low), Image(high)


def synth_dataset(count: int, seed: int = 0, cfg: SynthConfig = SynthConfig()) -> list[tuple[Image, Image]]:
    """``count`` independent pairs; pair ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    children = np.random.SeedSequence(seed).spawn(count)
    return [synth_pair(s, cfg) for s in children]


def write_dataset(outdir, count: int, seed: int = 0, cfg: SynthConfig = SynthConfig()) -> list[str]:
    """Write ``low/synth_XXXX.png`` and ``high/synth_XXXX.png``; returns the stems."""
    from .io import write_image

    outdir = Path(outdir)
    pairs = synth_dataset(count, seed, cfg)
    (outdir / "low").mkdir(parents=True, exist_ok=True)
    (outdir / "high").mkdir(parents=True, exist_ok=True)
    stems = []
    for i, (low, high) in enumerate(pairs):
        stem = f"synth_{i:04d}"
        write_image(outdir / "low" / f"{stem}.png", low, bits=16)
        write_image(outdir / "high" / f"{stem}.png", high, bits=16)
        stems.append(stem)
    logger.info("wrote %d synthetic pairs to %s", count, outdir)
    return stems
