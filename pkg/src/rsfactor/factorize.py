"""Recursive specularity factorization of an image into K additive factors.

For every channel the recursion starts from ``X^1 = I`` and, for
``k = 1..K``, extracts a sparse component ``E^k`` from ``X^k`` with an
unrolled ADMM solve whose thresholds are relaxed along ``nu^k = k/K``, then
continues with ``X^{k+1} = X^k - E^k``.  The leftover ``X^{K+1}`` is folded
into ``E^K`` so that the factors sum to the input exactly.

Threshold units
---------------
With ``units="relative"`` (default) each recursion input is divided by its
mean magnitude ``s = mean|X^k|`` before the solve and the extracted
component is scaled back afterwards, so learned thresholds are expressed in
multiples of the input mean.  The singular-value threshold is additionally
multiplied by ``sqrt(H*W)``, the spectral norm of a constant unit image, so
``beta = nu`` removes a ``nu`` share of a flat image's energy.  With
``units="absolute"`` the scalars are used verbatim on the raw channel.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .admm import DEFAULT_T, FactorParams, SolverState, solve_trace
from .image import Image, as_array

logger = logging.getLogger(__name__)

DEFAULT_K = 5
MAX_K = 16
DEFAULT_BLEND = 0.9


def nu_schedule(k_factors: int) -> np.ndarray:
    """``nu^k = k/K`` for ``k = 1..K``."""
    return np.arange(1, k_factors + 1, dtype=np.float64) / k_factors


@dataclass(frozen=True)
class ParamVector:
    """All learned factorization scalars plus the conventions they assume."""

    factors: tuple[FactorParams, ...]
    blend: float = DEFAULT_BLEND
    units: str = "relative"
    low_rank: str = "nuclear"
    dual_norm: str = "spectral"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not 1 <= len(self.factors) <= MAX_K:
            raise ValueError(f"K must be in 1..{MAX_K}, got {len(self.factors)}")
        if len({f.t_iters for f in self.factors}) != 1:
            raise ValueError("all factors must have the same number of iterations")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")
        if self.units not in ("relative", "absolute"):
            raise ValueError(f"unknown threshold units {self.units!r}")
        if self.low_rank not in ("nuclear", "frobenius"):
            raise ValueError(f"unknown low-rank prox {self.low_rank!r}")
        if self.dual_norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown dual norm {self.dual_norm!r}")

    @property
    def k_factors(self) -> int:
        return len(self.factors)

    @property
    def t_iters(self) -> int:
        return self.factors[0].t_iters

    @property
    def nu(self) -> np.ndarray:
        return nu_schedule(self.k_factors)

    @property
    def size(self) -> int:
        return 3 * self.k_factors * self.t_iters

    @classmethod
    def initial(
        cls,
        k_factors: int = DEFAULT_K,
        t_iters: int = DEFAULT_T,
        level: float = 1.0,
        mu: float = 1.0,
        **kwargs,
    ) -> ParamVector:
        """Learned scalars seeded with the analytic schedule at input mean ``level``.

        ``alpha^k = (1 - nu^k) * level`` and ``beta^k = nu^k * level`` for
        every iteration; ``level`` is 1 in relative units, or the dataset mean
        in absolute units.
        """
        if not 1 <= k_factors <= MAX_K:
            raise ValueError(f"K must be in 1..{MAX_K}, got {k_factors}")
        if t_iters < 1:
            raise ValueError("T must be >= 1")
        factors = tuple(
            FactorParams.constant((1.0 - nu) * level, nu * level, mu, t_iters)
            for nu in nu_schedule(k_factors)
        )
        return cls(factors, **kwargs)

    def to_vector(self) -> np.ndarray:
        """Flatten as ``[alpha^1, beta^1, mu^1, alpha^2, ...]``, each of length T."""
        return np.array(
            [v for f in self.factors for v in (*f.alpha, *f.beta, *f.mu)], dtype=np.float64
        )

    def with_vector(self, vec, probe: bool = False) -> ParamVector:
        """Inverse of :meth:`to_vector`; ``probe=True`` allows negative thresholds."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} values, got {vec.shape}")
        t = self.t_iters
        blocks = vec.reshape(self.k_factors, 3, t)
        make = FactorParams.unchecked if probe else FactorParams
        factors = tuple(make(b[0], b[1], b[2]) for b in blocks)
        return ParamVector(factors, self.blend, self.units, self.low_rank, self.dual_norm)

    def positive_mask(self) -> np.ndarray:
        """True at the coordinates holding a step size ``mu``."""
        mask = np.zeros((self.k_factors, 3, self.t_iters), dtype=bool)
        mask[:, 2, :] = True
        return mask.ravel()

    def to_dict(self) -> dict:
        return {
            "k_factors": self.k_factors,
            "t_iters": self.t_iters,
            "blend": self.blend,
            "units": self.units,
            "low_rank": self.low_rank,
            "dual_norm": self.dual_norm,
            "factors": [
                {"alpha": list(f.alpha), "beta": list(f.beta), "mu": list(f.mu)}
                for f in self.factors
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParamVector:
        factors = tuple(FactorParams(f["alpha"], f["beta"], f["mu"]) for f in d["factors"])
        pv = cls(
            factors,
            blend=d.get("blend", DEFAULT_BLEND),
            units=d.get("units", "relative"),
            low_rank=d.get("low_rank", "nuclear"),
            dual_norm=d.get("dual_norm", "spectral"),
        )
        if pv.k_factors != d.get("k_factors", pv.k_factors) or pv.t_iters != d.get("t_iters", pv.t_iters):
            raise ValueError("k_factors/t_iters do not match the stored factors")
        return pv


def init_factor_thresholds(
    k: int, k_factors: int, x_mean: float, learned: FactorParams, blend: float = DEFAULT_BLEND
) -> FactorParams:
    """Per-instance thresholds: ``blend * learned + (1 - blend) * analytic``.

    The analytic part is ``alpha = (1 - nu^k) * x_mean`` and
    ``beta = nu^k * x_mean`` for every iteration; ``mu`` is taken from
    ``learned`` unchanged.  Thresholds are clamped at zero.
    """
    if not 1 <= k <= k_factors:
        raise ValueError(f"factor index {k} outside 1..{k_factors}")
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    nu = k / k_factors
    a0 = (1.0 - nu) * x_mean
    b0 = nu * x_mean
    alpha = [max(blend * a + (1.0 - blend) * a0, 0.0) for a in learned.alpha]
    beta = [max(blend * b + (1.0 - blend) * b0, 0.0) for b in learned.beta]
    return FactorParams(alpha, beta, learned.mu)


@dataclass
class FactorStep:
    """Everything one recursion level of one channel produced."""

    x: np.ndarray  # recursion input X^k
    scale: float  # divisor applied before the solve
    params: FactorParams  # effective (per-instance) parameters
    states: list[SolverState] = field(repr=False)
    e: np.ndarray = field(repr=False)  # extracted component, input units

    @property
    def x_solver(self) -> np.ndarray:
        return self.x / self.scale


def _effective_params(k: int, pv: ParamVector, xs: np.ndarray, learned: FactorParams) -> FactorParams:
    x_mean = max(float(xs.sum() / xs.size), 0.0)
    eff = init_factor_thresholds(k, pv.k_factors, x_mean, learned, pv.blend)
    if pv.units == "relative":
        root = float(np.sqrt(xs.size))
        eff = FactorParams(eff.alpha, [b * root for b in eff.beta], eff.mu)
    return eff


def factor_step(k: int, x: np.ndarray, pv: ParamVector, learned: FactorParams | None = None,
                start: SolverState | None = None) -> FactorStep:
    """Solve recursion level ``k`` on channel matrix ``x``.

    ``learned`` overrides the stored parameters of factor ``k`` and ``start``
    resumes an earlier trace; both exist for finite-difference probing.
    """
    learned = pv.factors[k - 1] if learned is None else learned
    if pv.units == "relative":
        scale = float(np.abs(x).sum() / x.size)
    else:
        scale = 1.0
    if scale == 0.0:
        zero = np.zeros_like(x)
        return FactorStep(x, 1.0, learned, [], zero)
    xs = x / scale if scale != 1.0 else x
    eff = _effective_params(k, pv, xs, learned)
    states = solve_trace(xs, eff, start=start, low_rank=pv.low_rank, dual_norm=pv.dual_norm)
    e = states[-1].e * scale if scale != 1.0 else states[-1].e
    return FactorStep(x, scale, eff, states, e)


def factorize_channel(x, pv: ParamVector) -> list[FactorStep]:
    """Run the K-level recursion on one channel; returns one step per level."""
    xk = np.asarray(x, dtype=np.float64)
    steps = []
    for k in range(1, pv.k_factors + 1):
        step = factor_step(k, xk, pv)
        steps.append(step)
        xk = xk - step.e
    return steps


@dataclass
class FactorStack:
    """Factors ``E^1..E^K`` and difference maps ``F^1..F^K`` of one image.

    Arrays are float64 ``(K, H, W, C)``.  ``inputs`` holds the recursion
    inputs ``X^1..X^K`` and ``residual`` the leftover ``X^{K+1}`` that was
    folded into ``E^K``.
    """

    e: np.ndarray
    f: np.ndarray
    inputs: np.ndarray
    residual: np.ndarray
    residual_absorbed: bool = True
    last_raw: np.ndarray | None = field(default=None, repr=False)  # E^K before absorption

    @property
    def k_factors(self) -> int:
        return self.e.shape[0]

    @property
    def source_shape(self) -> tuple[int, int, int]:
        return self.e.shape[1:]

    @property
    def nu(self) -> np.ndarray:
        return nu_schedule(self.k_factors)

    def e_raw(self) -> np.ndarray:
        """Factors before residual absorption (only ``E^K`` differs)."""
        if not self.residual_absorbed:
            return self.e
        raw = self.e.copy()
        raw[-1] = self.last_raw if self.last_raw is not None else self.e[-1] - self.residual
        return raw

    def energy_ratios(self) -> np.ndarray:
        """``mean(E^k) / mean(X^k)`` per factor and channel, shape ``(K, C)``.

        Uses the pre-absorption factors; entries whose input mean is zero are
        reported as 0.
        """
        e = self.e_raw()
        k, h, w, c = e.shape
        num = e.reshape(k, h * w, c).sum(axis=1) / (h * w)
        den = self.inputs.reshape(k, h * w, c).sum(axis=1) / (h * w)
        out = np.zeros_like(num)
        ok = np.abs(den) > 1e-12
        out[ok] = num[ok] / den[ok]
        return out


def factor_differences(e) -> np.ndarray:
    """``F^1 = E^1`` and ``F^k = E^k - E^{k-1}``; values stay signed."""
    if isinstance(e, np.ndarray):
        arr = e
    else:
        parts = [np.asarray(x, dtype=np.float64) for x in e]
        if not parts:
            raise ValueError("need at least one factor")
        if any(p.shape != parts[0].shape for p in parts):
            raise ValueError("factor shapes differ")
        arr = np.stack(parts)
    if arr.shape[0] < 1:
        raise ValueError("need at least one factor")
    f = arr.astype(np.float64, copy=True)
    f[1:] -= arr[:-1]
    return f


def assemble_stack(channel_steps: list[list[FactorStep]], absorb: bool = True) -> FactorStack:
    """Build a FactorStack from per-channel recursion results."""
    e = np.stack([np.stack([s.e for s in steps], axis=-1) for steps in zip(*channel_steps)])
    inputs = np.stack([np.stack([s.x for s in steps], axis=-1) for steps in zip(*channel_steps)])
    last_raw = e[-1].copy()
    residual = inputs[-1] - last_raw
    if absorb:
        # E^K takes everything that is left, which is exactly X^K
        e[-1] = inputs[-1]
    return FactorStack(e, factor_differences(e), inputs, residual, absorb, last_raw)


def factorize(img, params: ParamVector, absorb_residual: bool = True) -> FactorStack:
    """Split an image into ``K`` additive factors, channel by channel."""
    arr = as_array(img)
    channel_steps = [factorize_channel(arr[:, :, c].astype(np.float64), params) for c in range(arr.shape[2])]
    return assemble_stack(channel_steps, absorb_residual)


def export_factors(stack: FactorStack, outdir, stem: str, include_differences: bool = False,
                   include_residual: bool = False, bits: int = 8) -> list[Path]:
    """Write ``<stem>_E1.png .. <stem>_EK.png`` plus ``<stem>_meta.json``.

    Each layer is min-max rescaled to [0, 1]; the sidecar records the
    original ``min``/``max`` (``value = min + png * (max - min)``), the
    per-channel means and ``nu``.
    """
    from .io import write_image

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    layers: list[tuple[str, np.ndarray]] = [(f"E{k + 1}", stack.e[k]) for k in range(stack.k_factors)]
    if include_differences:
        layers += [(f"F{k + 1}", stack.f[k]) for k in range(stack.k_factors)]
    if include_residual:
        layers.append(("R", stack.residual))
    nu = stack.nu
    meta = {"stem": stem, "k_factors": stack.k_factors, "source_shape": list(stack.source_shape),
            "residual_absorbed": stack.residual_absorbed, "layers": []}
    written = []
    for name, arr in layers:
        lo, hi = float(arr.min()), float(arr.max())
        span = hi - lo
        scaled = (arr - lo) / span if span > 0 else np.zeros_like(arr)
        path = write_image(outdir / f"{stem}_{name}.png", Image(np.clip(scaled, 0.0, 1.0)), bits=bits)
        written.append(path)
        entry = {"name": name, "file": path.name, "min": lo, "max": hi,
                 "mean": [float(m) for m in arr.reshape(-1, arr.shape[-1]).mean(axis=0)]}
        if name.startswith("E"):
            entry["nu"] = float(nu[int(name[1:]) - 1])
        meta["layers"].append(entry)
    meta_path = outdir / f"{stem}_meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written
