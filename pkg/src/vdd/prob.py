"""Gaussian and categorical primitives.

Covariances are carried as lower-triangular Cholesky factors ``L`` with
``Sigma = L @ L.T``. Every function broadcasts over leading batch axes, so a
mean of shape ``(..., d)`` and a factor of shape ``(d, d)`` or ``(..., d, d)``
are both accepted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = np.log(2.0 * np.pi)
# diagonal entries below this are treated as singular
CHOL_DIAG_FLOOR = 1e-150


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        chol = np.asarray(self.chol, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)
        check_chol(chol)
        if chol.shape[-1] != mean.shape[-1]:
            raise ValueError(
                f"mean has dimension {mean.shape[-1]} but chol is {chol.shape[-2:]}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ np.swapaxes(self.chol, -1, -2)


@dataclass(frozen=True)
class CategoricalParams:
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        object.__setattr__(self, "logits", logits)

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def check_chol(chol: np.ndarray) -> None:
    chol = np.asarray(chol)
    if chol.ndim < 2 or chol.shape[-1] != chol.shape[-2]:
        raise ValueError(f"Cholesky factor must be square, got shape {chol.shape}")
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    if not np.all(np.isfinite(chol)):
        raise ValueError("Cholesky factor has non-finite entries")
    if np.any(diag <= CHOL_DIAG_FLOOR):
        raise ValueError("Cholesky factor must have a strictly positive diagonal")
    if np.any(np.triu(chol, k=1) != 0.0):
        raise ValueError("Cholesky factor must be lower-triangular")


def _as_params(p, chol=None) -> GaussianParams:
    if isinstance(p, GaussianParams):
        return p
    return GaussianParams(p, chol)


def _tri_solve(chol: np.ndarray, rhs: np.ndarray, trans: bool = False) -> np.ndarray:
    """Solve ``L y = rhs`` (or ``L^T y = rhs``) for rhs of shape ``(..., d)``."""
    if chol.ndim == 2:
        flat = rhs.reshape(-1, rhs.shape[-1]).T
        out = solve_triangular(chol, flat, lower=True, trans=1 if trans else 0,
                               check_finite=False)
        return out.T.reshape(rhs.shape)
    chol_b, rhs_b = np.broadcast_arrays(chol, rhs[..., None])
    mat = np.swapaxes(chol_b, -1, -2) if trans else chol_b
    # batched factors are small; a generic batched solve is fine here
    return np.linalg.solve(mat, rhs_b)[..., 0]


def logsumexp(x, axis=-1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp (lighter than the scipy version on small arrays)."""
    x = np.asarray(x, dtype=np.float64)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    out = np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx
    return out if keepdims else np.squeeze(out, axis=axis)


def log_det_chol(chol: np.ndarray) -> np.ndarray:
    """``log |Sigma|`` for ``Sigma = L L^T``."""
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


def gaussian_log_pdf(x, p: GaussianParams, chol=None) -> np.ndarray:
    """Log density of ``N(mean, L L^T)`` at ``x`` via one triangular solve."""
    p = _as_params(p, chol)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.dim:
        raise ValueError(f"x has dimension {x.shape[-1]}, expected {p.dim}")
    diff = x - p.mean
    white = _tri_solve(p.chol, diff)
    maha = np.sum(white * white, axis=-1)
    return -0.5 * (maha + p.dim * LOG_2PI + log_det_chol(p.chol))


def reparameterize(p: GaussianParams, eps, chol=None) -> np.ndarray:
    """Map standard-normal ``eps`` to ``mean + L eps``."""
    p = _as_params(p, chol)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != p.dim:
        raise ValueError(f"eps has dimension {eps.shape[-1]}, expected {p.dim}")
    return p.mean + np.einsum("...ij,...j->...i", p.chol, eps)


def gaussian_entropy(p: GaussianParams, chol=None) -> np.ndarray:
    p = _as_params(p, chol)
    diag = np.diagonal(p.chol, axis1=-2, axis2=-1)
    return 0.5 * p.dim * (1.0 + LOG_2PI) + np.sum(np.log(diag), axis=-1)


def gaussian_score(x, p: GaussianParams, chol=None) -> np.ndarray:
    """Gradient of the log density, ``-Sigma^{-1} (x - mean)``."""
    p = _as_params(p, chol)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.dim:
        raise ValueError(f"x has dimension {x.shape[-1]}, expected {p.dim}")
    white = _tri_solve(p.chol, x - p.mean)
    return -_tri_solve(p.chol, white, trans=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax(logits, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def categorical_sample(logits, u) -> np.ndarray:
    """Inverse-CDF draw over ``softmax(logits)`` with one uniform per row.

    ``u`` in ``[0, 1)`` has the batch shape of ``logits[..., 0]``.
    """
    probs = softmax(logits)
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0.0) | (u >= 1.0)):
        raise ValueError("u must lie in [0, 1)")
    cdf = np.cumsum(probs, axis=-1)
    idx = np.sum(cdf <= u[..., None], axis=-1)
    # guards against cdf[-1] rounding below u
    return np.minimum(idx, probs.shape[-1] - 1)


# --- unconstrained Cholesky parameterization --------------------------------

def chol_from_raw(raw: np.ndarray) -> np.ndarray:
    """Diagonal stored as logs, strict lower triangle stored as-is."""
    raw = np.asarray(raw, dtype=np.float64)
    d = raw.shape[-1]
    out = np.tril(raw, k=-1)
    idx = np.arange(d)
    out[..., idx, idx] = np.exp(raw[..., idx, idx])
    return out


def raw_from_chol(chol: np.ndarray) -> np.ndarray:
    check_chol(chol)
    d = chol.shape[-1]
    out = np.tril(np.array(chol, dtype=np.float64), k=-1)
    idx = np.arange(d)
    out[..., idx, idx] = np.log(chol[..., idx, idx])
    return out


def chol_grad_to_raw(grad_chol: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Chain rule from a gradient w.r.t. ``L`` to the unconstrained parameters."""
    d = chol.shape[-1]
    out = np.tril(grad_chol, k=-1)
    idx = np.arange(d)
    out[..., idx, idx] = grad_chol[..., idx, idx] * chol[..., idx, idx]
    return out


def safe_cholesky(cov: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Cholesky factor of a symmetric matrix after flooring its eigenvalues."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    fixed = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return np.linalg.cholesky(0.5 * (fixed + np.swapaxes(fixed, -1, -2)))


def gaussian_kl(p: GaussianParams, q: GaussianParams) -> float:
    """Closed-form ``KL(p || q)`` for single Gaussians."""
    d = p.dim
    m = _tri_solve(q.chol, q.mean - p.mean)
    a = solve_triangular(q.chol, p.chol, lower=True)
    return 0.5 * (np.sum(a * a) + np.sum(m * m) - d
                  + log_det_chol(q.chol) - log_det_chol(p.chol))
