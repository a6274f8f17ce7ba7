"""Unrolled ADMM for one specular/diffuse split ``X = A + E``.

Each iteration applies, in order::

    E <- soft(X - A - Y/mu, alpha_t)
    A <- svt(X - E - Y/mu, beta_t)
    Y <- Y + mu * (A + E - X)

with per-iteration scalars ``(alpha_t, beta_t, mu_t)``.  There is no stopping
rule: a solve always runs exactly ``T`` iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import frobenius_norm, spectral_norm
from .prox import LOW_RANK_PROX, soft_threshold

DEFAULT_T = 3


class SolverDivergence(FloatingPointError):
    """An ADMM update produced non-finite values."""


@dataclass(frozen=True)
class FactorParams:
    """Per-iteration thresholds and dual step sizes for one factor."""

    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    mu: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(v) for v in self.alpha))
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        if not (len(self.alpha) == len(self.beta) == len(self.mu)):
            raise ValueError("alpha, beta and mu must have the same length")
        vals = self.alpha + self.beta + self.mu
        if not all(np.isfinite(vals)):
            raise ValueError("factor parameters must be finite")
        if min(self.alpha + self.beta, default=0.0) < 0:
            raise ValueError("thresholds must be non-negative")
        if min(self.mu, default=1.0) <= 0:
            raise ValueError("mu must be positive")

    @property
    def t_iters(self) -> int:
        return len(self.alpha)

    @classmethod
    def unchecked(cls, alpha, beta, mu) -> FactorParams:
        """Build without the threshold sign check, for finite-difference probes.

        Effective thresholds are clamped at zero downstream, so a probe may
        sit slightly below the feasible set.
        """
        obj = object.__new__(cls)
        object.__setattr__(obj, "alpha", tuple(float(v) for v in alpha))
        object.__setattr__(obj, "beta", tuple(float(v) for v in beta))
        object.__setattr__(obj, "mu", tuple(float(v) for v in mu))
        if min(obj.mu, default=1.0) <= 0:
            raise ValueError("mu must be positive")
        return obj

    @classmethod
    def constant(cls, alpha: float, beta: float, mu: float, t_iters: int = DEFAULT_T) -> FactorParams:
        return cls((alpha,) * t_iters, (beta,) * t_iters, (mu,) * t_iters)

    @classmethod
    def classical(cls, x, t_iters: int = 200, lam: float | None = None, mu: float | None = None) -> FactorParams:
        """Convergent fixed-step RPCA schedule: ``alpha = lam/mu``, ``beta = 1/mu``.

        Defaults follow principal component pursuit: ``lam = 1/sqrt(max(m, n))``
        and ``mu = m*n / (4 * ||X||_1)``.
        """
        a = np.asarray(x, dtype=np.float64)
        if lam is None:
            lam = 1.0 / np.sqrt(max(a.shape))
        if mu is None:
            mu = a.size / (4.0 * max(float(np.abs(a).sum()), 1e-300))
        return cls.constant(lam / mu, 1.0 / mu, mu, t_iters)


@dataclass(frozen=True)
class SolverState:
    e: np.ndarray
    a: np.ndarray
    y: np.ndarray
    t: int = 0


def init_state(x, dual_norm: str = "spectral") -> SolverState:
    """``E0 = 0``, ``A0 = X``, ``Y0 = X / ||X||`` (zero when ``X`` is zero)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot solve an empty matrix")
    if dual_norm == "spectral":
        nrm = spectral_norm(x)
    elif dual_norm == "frobenius":
        nrm = frobenius_norm(x)
    else:
        raise ValueError(f"unknown dual_norm {dual_norm!r}")
    y = x / nrm if nrm > 0 else np.zeros_like(x)
    return SolverState(np.zeros_like(x), x.copy(), y, 0)


def admm_step(
    state: SolverState,
    x,
    alpha_t: float,
    beta_t: float,
    mu_t: float,
    low_rank: str = "nuclear",
) -> SolverState:
    """One ADMM iteration; returns a new state."""
    if not mu_t > 0:
        raise ValueError(f"mu_t must be positive, got {mu_t}")
    x = np.asarray(x, dtype=np.float64)
    prox = LOW_RANK_PROX[low_rank]
    # overflow is reported below as SolverDivergence, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        y_scaled = state.y / mu_t
        e = soft_threshold(x - state.a - y_scaled, alpha_t)
        if not np.all(np.isfinite(e)):
            raise SolverDivergence(f"E update produced non-finite values at t={state.t}")
        try:
            a = prox(x - e - y_scaled, beta_t)
        except ValueError as exc:
            raise SolverDivergence(f"A update failed at t={state.t}: {exc}") from exc
        if not np.all(np.isfinite(a)):
            raise SolverDivergence(f"A update produced non-finite values at t={state.t}")
        y = state.y + mu_t * (a + e - x)
        if not np.all(np.isfinite(y)):
            raise SolverDivergence(f"Y update produced non-finite values at t={state.t}")
    return SolverState(e, a, y, state.t + 1)


def solve_trace(
    x,
    params: FactorParams,
    start: SolverState | None = None,
    low_rank: str = "nuclear",
    dual_norm: str = "spectral",
) -> list[SolverState]:
    """All iterates ``[S_t0, ..., S_T]`` of a solve.

    ``start`` resumes from a cached state (its ``t`` selects which parameters
    are used next), which lets finite-difference probes skip the iterations
    that a perturbation cannot influence.
    """
    x = np.asarray(x, dtype=np.float64)
    state = init_state(x, dual_norm) if start is None else start
    states = [state]
    for t in range(state.t, params.t_iters):
        state = admm_step(state, x, params.alpha[t], params.beta[t], params.mu[t], low_rank)
        states.append(state)
    return states


def solve_factor(
    x,
    params: FactorParams,
    low_rank: str = "nuclear",
    dual_norm: str = "spectral",
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``T`` iterations from :func:`init_state`; return ``(E, A)``."""
    final = solve_trace(x, params, low_rank=low_rank, dual_norm=dual_norm)[-1]
    return final.e, final.a


def feasibility_residual(x, e, a) -> float:
    """``||A + E - X||_F``."""
    return frobenius_norm(np.asarray(a) + np.asarray(e) - np.asarray(x, dtype=np.float64))
