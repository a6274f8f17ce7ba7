"""Shrinkage operators and the SVD they rely on."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

# Thresholds at or above this fraction of ||M||_F**2 (in beta**2) take the
# Gram-matrix route; below it eigenvalue round-off would dominate.
_GRAM_MIN_REL = 1e-8
_SV_CLAMP_REL = 1e-12


class SvdResult(NamedTuple):
    """Thin SVD ``u @ diag(s) @ vt``."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def soft_threshold(x, alpha: float):
    """Elementwise soft-thresholding ``sign(x) * max(|x| - alpha, 0)``.

    Scalars come back as Python floats, arrays as float64 arrays.
    """
    if alpha < 0:
        raise ValueError(f"soft_threshold needs alpha >= 0, got {alpha}")
    if np.isscalar(x):
        x = float(x)
        mag = abs(x) - alpha
        return float(np.copysign(mag, x)) if mag > 0 else 0.0
    a = np.asarray(x, dtype=np.float64)
    if alpha == 0:
        return a.copy()
    return np.sign(a) * np.maximum(np.abs(a) - alpha, 0.0)


def _check_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def svd(m) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Singular values below ``1e-12 * s_max`` are set to zero, and each column
    of ``u`` is flipped (together with the matching row of ``vt``) so that
    its first entry of non-negligible magnitude is non-negative.
    """
    a = _check_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size and s[0] > 0:
        s = np.where(s < _SV_CLAMP_REL * s[0], 0.0, s)
    # first entry with |u_ij| above 1e-12 decides the sign of column j
    significant = np.abs(u) > 1e-12
    first = np.argmax(significant, axis=0)
    signs = np.sign(u[first, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(u, s, vt)


def singular_value_threshold(m, beta: float) -> np.ndarray:
    """Proximal operator of ``beta * ||.||_*``: soft-threshold the singular values.

    Only the singular triplets with ``sigma > beta`` survive, so for thresholds
    that are not vanishingly small the result is assembled from the partial
    eigendecomposition of the Gram matrix::

        A = M V diag(1 - beta / sigma) V^T,   sigma**2 = eig(M^T M) > beta**2

    which avoids computing the full SVD.
    """
    if beta < 0:
        raise ValueError(f"singular_value_threshold needs beta >= 0, got {beta}")
    a = _check_matrix(m)
    if beta == 0:
        return a.copy()
    fro2 = float(np.sum(a * a))
    beta2 = float(beta) * float(beta)
    if beta2 >= fro2:
        # every singular value is <= ||M||_F <= beta
        return np.zeros_like(a)
    if beta2 < _GRAM_MIN_REL * fro2:
        r = svd(a)
        return (r.u * soft_threshold(r.s, beta)) @ r.vt
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    gram = a.T @ a
    w, v = scipy.linalg.eigh(
        gram, subset_by_value=(beta2, np.inf), driver="evr", check_finite=False
    )
    if w.size == 0:
        out = np.zeros_like(a)
    else:
        shrink = 1.0 - beta / np.sqrt(w)
        out = ((a @ v) * shrink) @ v.T
    return out.T if transposed else out


def frobenius_prox(m, beta: float) -> np.ndarray:
    """Proximal operator of ``beta * ||.||_F``: uniform shrinkage ``M * max(1 - beta/||M||_F, 0)``."""
    if beta < 0:
        raise ValueError(f"frobenius_prox needs beta >= 0, got {beta}")
    a = _check_matrix(m)
    nrm = float(np.sqrt(np.sum(a * a)))
    if nrm <= beta:
        return np.zeros_like(a)
    return a * (1.0 - beta / nrm)


def nuclear_norm(m) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)))


LOW_RANK_PROX = {
    "nuclear": singular_value_threshold,
    "frobenius": frobenius_prox,
}
