"""Zero-reference training of the factorization scalars and fusion gammas.

Gradients are central finite differences.  The objective only involves a few
dozen scalars, so each step costs ``2 * n_params`` objective evaluations.
Probes reuse the cached solver trace of the unperturbed run: perturbing a
scalar of factor ``k`` at iteration ``t`` restarts that factor from its
stored state at ``t`` and re-runs only what follows.

Training follows a two-phase curriculum: before ``freeze_epoch`` the
factorization scalars (and, with the full objective, the fusion gammas) are
updated; from ``freeze_epoch`` on the factorization is frozen, the
factorization loss is dropped and only the gammas move.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .admm import FactorParams
from .factorize import (
    FactorStep,
    ParamVector,
    assemble_stack,
    factor_step,
    factorize,
    factorize_channel,
)
from .fusion import BilateralConfig, FusionConfig, fuse
from .image import as_array
from .losses import (
    factor_ratio_term,
    loss_color,
    loss_exposure,
    loss_factorization,
    loss_smooth,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MU_FLOOR = 1e-6
HISTORY_FIELDS = ("epoch", "phase", "L_f", "L_c", "L_e", "L_s", "total")


@dataclass(frozen=True)
class TrainConfig:
    k_factors: int = 5
    t_iters: int = 3
    lambda_f: float = 1.0
    lambda_c: float = 1.0
    lambda_e: float = 10.0
    lambda_s: float = 1.0
    learning_rate: float = 0.01
    # step size for the fusion gammas; None reuses learning_rate
    gamma_learning_rate: float | None = None
    batch_size: int = 10
    epochs: int = 50
    freeze_epoch: int = 25
    seed: int = 2
    fd_step: float = 1e-3
    exposure_target: float = 0.6
    exposure_window: int = 16
    # "full": phase 1 minimizes the whole weighted loss; "factorization": L_f only
    phase1_objective: str = "full"
    # "chain": exact L_f gradient through later factors; "blockwise": factor k's
    # scalars only see their own ratio term with X^k held fixed
    lf_gradient: str = "blockwise"
    optimizer: str = "sgd"
    grad_clip: float = 0.0
    blend: float = 0.9
    units: str = "relative"
    low_rank: str = "nuclear"
    dual_norm: str = "spectral"
    fusion_mode: str = "curve"
    factor_weights: tuple[float, ...] | None = None
    bilateral_window: int = 5
    bilateral_sigma_color: float = 0.5
    bilateral_sigma_space: float = 1.0
    jobs: int = 1

    def __post_init__(self):
        if self.factor_weights is not None:
            object.__setattr__(self, "factor_weights", tuple(float(w) for w in self.factor_weights))
        if self.epochs < 0 or self.freeze_epoch < 0 or self.freeze_epoch > self.epochs:
            raise ValueError("need 0 <= freeze_epoch <= epochs")
        if min(self.lambda_f, self.lambda_c, self.lambda_e, self.lambda_s) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.learning_rate < 0 or (self.gamma_learning_rate or 0.0) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.phase1_objective not in ("full", "factorization"):
            raise ValueError(f"unknown phase1_objective {self.phase1_objective!r}")
        if self.lf_gradient not in ("chain", "blockwise"):
            raise ValueError(f"unknown lf_gradient {self.lf_gradient!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @property
    def loss_weights(self) -> np.ndarray:
        return np.array([self.lambda_f, self.lambda_c, self.lambda_e, self.lambda_s])

    def initial_params(self, images: Sequence | None = None) -> ParamVector:
        level = 1.0
        if self.units == "absolute" and images:
            level = float(np.mean([as_array(im).astype(np.float64).mean() for im in images]))
        return ParamVector.initial(
            self.k_factors, self.t_iters, level=level, blend=self.blend,
            units=self.units, low_rank=self.low_rank, dual_norm=self.dual_norm,
        )

    def initial_fusion(self) -> FusionConfig:
        fcfg = FusionConfig.default(
            self.k_factors,
            mode=self.fusion_mode,
            bilateral=BilateralConfig(self.bilateral_window, self.bilateral_sigma_color, self.bilateral_sigma_space),
        )
        if self.factor_weights is not None:
            fcfg = fcfg.with_weights(self.factor_weights)
        return fcfg

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def fd_gradient(
    objective: Callable[[np.ndarray], float],
    params,
    h: float = 1e-3,
    positive: np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference gradient ``(f(p + h e_i) - f(p - h e_i)) / 2h``.

    Coordinates flagged in ``positive`` must stay strictly positive, so they
    are probed with ``h_i = min(h, p_i / 2)``.  Other coordinates may leave
    their nominal bounds during the probe.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    p = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        hi = h
        if positive is not None and positive[i]:
            hi = min(h, p[i] / 2.0)
        up = p.copy()
        up[i] += hi
        dn = p.copy()
        dn[i] -= hi
        fu, fd = objective(up), objective(dn)
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise FloatingPointError(f"objective is non-finite when probing coordinate {i}")
        grad[i] = (fu - fd) / (2.0 * hi)
    return grad


def _perturbed(pv: ParamVector, k: int, kind: int, t: int, value: float) -> FactorParams:
    f = pv.factors[k]
    cols = [list(f.alpha), list(f.beta), list(f.mu)]
    cols[kind][t] = value
    return FactorParams.unchecked(*cols)


def _coords(pv: ParamVector):
    for k in range(pv.k_factors):
        for kind in range(3):
            for t in range(pv.t_iters):
                yield k, kind, t


@dataclass
class _Objective:
    """Which loss terms a gradient evaluation needs."""

    weights: np.ndarray  # lambda_f, lambda_c, lambda_e, lambda_s as used this step
    exposure_target: float
    exposure_window: int

    @property
    def needs_fusion(self) -> bool:
        return bool(np.any(self.weights[1:] > 0))


def _fusion_parts(img: np.ndarray, stack, fcfg: FusionConfig, obj: _Objective) -> tuple[float, float, float]:
    out = fuse(img, stack, fcfg)
    lc = loss_color(out) if out.shape[2] == 3 else 0.0
    return lc, loss_exposure(out, obj.exposure_target, obj.exposure_window), loss_smooth(out)


def image_losses(img, pv: ParamVector, fcfg: FusionConfig, obj: _Objective, stack=None) -> np.ndarray:
    """``[L_f, L_c, L_e, L_s]`` for one image."""
    arr = as_array(img).astype(np.float64)
    if stack is None:
        stack = factorize(arr, pv)
    lf = loss_factorization(stack)
    return np.array([lf, *_fusion_parts(arr, stack, fcfg, obj)])


def _probe_factor(pv: ParamVector, base: FactorStep, k: int, learned, t: int) -> FactorStep:
    """Re-solve factor ``k`` (0-based) from the cached state at iteration ``t``."""
    if not base.states:
        return base
    return factor_step(k + 1, base.x, pv, learned=learned, start=base.states[t])


def _continue_chain(pv: ParamVector, steps: list[FactorStep], k: int, new: FactorStep) -> list[FactorStep]:
    """Recursion with factor ``k`` replaced by ``new`` and later factors recomputed."""
    seq = steps[:k] + [new]
    xk = new.x - new.e
    for j in range(k + 1, pv.k_factors):
        st = factor_step(j + 1, xk, pv)
        seq.append(st)
        xk = xk - st.e
    return seq


def image_gradient(
    img,
    pv: ParamVector,
    fcfg: FusionConfig,
    obj: _Objective,
    h: float,
    lf_gradient: str = "blockwise",
    train_gammas: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of one image's objective w.r.t. the factor scalars (and gammas).

    Returns ``(grad_theta, grad_gamma, parts)`` where ``parts`` are the
    unweighted losses at the current parameters.  A probe that leaves the
    perturbed factor bitwise unchanged (e.g. a threshold that never binds)
    has an exactly zero difference quotient and skips the downstream work.
    """
    arr = as_array(img).astype(np.float64)
    channels = [arr[:, :, c] for c in range(arr.shape[2])]
    steps = [factorize_channel(x, pv) for x in channels]
    stack = assemble_stack(steps)
    lf0 = loss_factorization(stack)
    fusion0 = _fusion_parts(arr, stack, fcfg, obj) if obj.needs_fusion else (0.0, 0.0, 0.0)
    parts = np.array([lf0, *fusion0])
    w = obj.weights
    use_chain_lf = lf_gradient == "chain" and w[0] > 0
    use_block_lf = lf_gradient == "blockwise" and w[0] > 0
    need_chain = use_chain_lf or obj.needs_fusion

    def probe_value(k, news):
        total = 0.0
        if need_chain:
            st = assemble_stack([_continue_chain(pv, s, k, n) for s, n in zip(steps, news)])
            if use_chain_lf:
                total += w[0] * loss_factorization(st)
            if obj.needs_fusion:
                lc, le, ls = _fusion_parts(arr, st, fcfg, obj)
                total += w[1] * lc + w[2] * le + w[3] * ls
        if use_block_lf:
            terms = [factor_ratio_term(n.e, n.x, pv.nu[k]) for n in news]
            total += w[0] * float(np.mean(terms))
        return total

    vec = pv.to_vector()
    grad = np.zeros_like(vec)
    if need_chain or use_block_lf:
        for i, (k, kind, t) in enumerate(_coords(pv)):
            hi = min(h, vec[i] / 2.0) if kind == 2 else h
            ups = [_probe_factor(pv, s[k], k, _perturbed(pv, k, kind, t, vec[i] + hi), t) for s in steps]
            dns = [_probe_factor(pv, s[k], k, _perturbed(pv, k, kind, t, vec[i] - hi), t) for s in steps]
            if all(np.array_equal(u.e, d.e) for u, d in zip(ups, dns)):
                continue
            fu, fd = probe_value(k, ups), probe_value(k, dns)
            if not (np.isfinite(fu) and np.isfinite(fd)):
                raise FloatingPointError(f"objective is non-finite when probing coordinate {i}")
            grad[i] = (fu - fd) / (2.0 * hi)

    ggrad = np.zeros(fcfg.k_factors)
    if train_gammas and obj.needs_fusion:
        ggrad = gamma_gradient(arr, stack, fcfg, obj, h)
    return grad, ggrad, parts


def gamma_gradient(img, stack, fcfg: FusionConfig, obj: _Objective, h: float) -> np.ndarray:
    """Gradient of the weighted fusion losses w.r.t. the K curve gammas."""
    arr = as_array(img).astype(np.float64)
    w = obj.weights

    def objective(g):
        lc, le, ls = _fusion_parts(arr, stack, fcfg.with_gammas(g), obj)
        return w[1] * lc + w[2] * le + w[3] * ls

    return fd_gradient(objective, np.array(fcfg.gammas), h)


class _Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def direction(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        return mh / (np.sqrt(vh) + self.eps)


def _step_direction(g: np.ndarray, cfg: TrainConfig, state: _Adam | None) -> np.ndarray:
    if cfg.grad_clip > 0:
        n = float(np.linalg.norm(g))
        if n > cfg.grad_clip:
            g = g * (cfg.grad_clip / n)
    if cfg.optimizer == "adam":
        return state.direction(g)
    return g


def clamp_params(vec: np.ndarray, pv: ParamVector) -> np.ndarray:
    """Project onto ``alpha, beta >= 0`` and ``mu >= 1e-6``."""
    out = vec.copy()
    pos = pv.positive_mask()
    out[~pos] = np.maximum(out[~pos], 0.0)
    out[pos] = np.maximum(out[pos], MU_FLOOR)
    return out


@dataclass
class TrainResult:
    params: ParamVector
    fusion: FusionConfig
    history: list[dict]
    config: TrainConfig


def _grad_task(args):
    img, pv, fcfg, obj, h, lf_gradient, train_gammas = args
    return image_gradient(img, pv, fcfg, obj, h, lf_gradient, train_gammas)


def _gamma_task(args):
    img, stack, fcfg, obj, h = args
    parts = image_losses(img, None, fcfg, obj, stack=stack)
    return gamma_gradient(img, stack, fcfg, obj, h), parts


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def train(
    images: Sequence,
    cfg: TrainConfig = TrainConfig(),
    params: ParamVector | None = None,
    fusion: FusionConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Two-phase zero-reference training over ``images``.

    Returns the learned ParamVector, the FusionConfig with trained gammas and
    one history row per epoch (mean losses over that epoch's images).
    """
    if not images:
        raise ValueError("training set is empty")
    arrays = [np.ascontiguousarray(as_array(im).astype(np.float64)) for im in images]
    pv = params if params is not None else cfg.initial_params(arrays)
    fcfg = fusion if fusion is not None else cfg.initial_fusion()
    if pv.k_factors != fcfg.k_factors:
        raise ValueError("ParamVector and FusionConfig disagree on K")
    rng = np.random.default_rng(cfg.seed)
    theta_opt = _Adam(pv.size) if cfg.optimizer == "adam" else None
    gamma_opt = _Adam(fcfg.k_factors) if cfg.optimizer == "adam" else None
    history: list[dict] = []
    frozen_stacks = None
    n = len(arrays)
    gamma_lr = cfg.learning_rate if cfg.gamma_learning_rate is None else cfg.gamma_learning_rate

    for epoch in range(cfg.epochs):
        phase = 1 if epoch < cfg.freeze_epoch else 2
        weights = cfg.loss_weights.copy()
        if phase == 1 and cfg.phase1_objective == "factorization":
            weights[1:] = 0.0
        if phase == 2:
            weights[0] = 0.0
        obj = _Objective(weights, cfg.exposure_target, cfg.exposure_window)
        reporting = _Objective(cfg.loss_weights, cfg.exposure_target, cfg.exposure_window)
        train_gammas = obj.needs_fusion and fcfg.mode == "curve"
        if phase == 2 and frozen_stacks is None:
            frozen_stacks = [factorize(a, pv) for a in arrays]
        order = rng.permutation(n)
        parts_by_image = np.zeros((n, 4))
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            if phase == 1:
                tasks = [(arrays[i], pv, fcfg, obj, cfg.fd_step, cfg.lf_gradient, train_gammas) for i in batch]
                results = _map(_grad_task, tasks, cfg.jobs)
                g_theta = sum(r[0] for r in results) / len(batch)
                g_gamma = sum(r[1] for r in results) / len(batch)
                for i, r in zip(batch, results):
                    parts = r[2]
                    if not obj.needs_fusion:
                        parts = image_losses(arrays[i], pv, fcfg, reporting)
                    parts_by_image[i] = parts
                if cfg.learning_rate > 0:
                    vec = pv.to_vector() - cfg.learning_rate * _step_direction(g_theta, cfg, theta_opt)
                    pv = pv.with_vector(clamp_params(vec, pv))
            else:
                tasks = [(arrays[i], frozen_stacks[i], fcfg, obj, cfg.fd_step) for i in batch]
                results = _map(_gamma_task, tasks, cfg.jobs)
                g_gamma = sum(r[0] for r in results) / len(batch)
                for i, r in zip(batch, results):
                    parts_by_image[i] = r[1]
                train_gammas = fcfg.mode == "curve"
            if train_gammas and gamma_lr > 0:
                gam = np.array(fcfg.gammas) - gamma_lr * _step_direction(g_gamma, cfg, gamma_opt)
                fcfg = fcfg.with_gammas(gam)
        # summed in image order so the means do not depend on the shuffle
        means = parts_by_image.sum(axis=0) / n
        row = {
            "epoch": epoch,
            "phase": phase,
            "L_f": float(means[0]),
            "L_c": float(means[1]),
            "L_e": float(means[2]),
            "L_s": float(means[3]),
            "total": float(np.dot(weights, means)),
        }
        history.append(row)
        logger.info(
            "epoch %d phase %d  L_f=%.4f L_c=%.4f L_e=%.4f L_s=%.5f total=%.4f",
            epoch, phase, row["L_f"], row["L_c"], row["L_e"], row["L_s"], row["total"],
        )
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(pv, fcfg, history, cfg)


def checkpoint_dict(result_or_params, fusion: FusionConfig | None = None, cfg: TrainConfig | None = None) -> dict:
    if isinstance(result_or_params, TrainResult):
        pv, fusion, cfg = result_or_params.params, result_or_params.fusion, result_or_params.config
    else:
        pv = result_or_params
    if fusion is None:
        fusion = FusionConfig.default(pv.k_factors)
    d = {
        "format_version": CHECKPOINT_VERSION,
        "k_factors": pv.k_factors,
        "t_iters": pv.t_iters,
        "params": pv.to_dict(),
        "fusion": fusion.to_dict(),
    }
    if cfg is not None:
        echo = asdict(cfg)
        if echo["factor_weights"] is not None:
            echo["factor_weights"] = list(echo["factor_weights"])
        d["config"] = echo
    return d


def save_checkpoint(path, result_or_params, fusion: FusionConfig | None = None, cfg: TrainConfig | None = None) -> Path:
    path = Path(path)
    text = json.dumps(checkpoint_dict(result_or_params, fusion, cfg), indent=2, sort_keys=True) + "\n"
    path.write_text(text)
    return path


class CheckpointVersionError(ValueError):
    def __init__(self, found):
        super().__init__(f"checkpoint format_version mismatch: expected {CHECKPOINT_VERSION}, found {found}")
        self.found = found


def load_checkpoint(path) -> tuple[ParamVector, FusionConfig, dict]:
    """Read a checkpoint; returns ``(params, fusion, raw_dict)``."""
    d = json.loads(Path(path).read_text())
    found = d.get("format_version")
    if found != CHECKPOINT_VERSION:
        raise CheckpointVersionError(found)
    pv = ParamVector.from_dict(d["params"])
    fcfg = FusionConfig.from_dict(d["fusion"])
    if pv.k_factors != d["k_factors"] or pv.t_iters != d["t_iters"] or fcfg.k_factors != pv.k_factors:
        raise ValueError("checkpoint K/T fields are inconsistent")
    return pv, fcfg, d


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def grid_search(
    images: Sequence,
    base: TrainConfig,
    grid: dict[str, Sequence],
    score: Callable[[TrainResult], float],
) -> list[tuple[dict, float]]:
    """Train once per combination of ``grid`` values; lower scores rank first.

    ``score`` receives the TrainResult, e.g. a validation PSNR negated or the
    final total loss.
    """
    keys = sorted(grid)
    results = []
    for values in product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        res = train(images, replace(base, **overrides))
        results.append((overrides, float(score(res))))
        logger.info("grid %s -> %.5f", overrides, results[-1][1])
    results.sort(key=lambda r: r[1])
    return results
