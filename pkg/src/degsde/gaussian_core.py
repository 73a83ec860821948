"""Dense symmetric factorization, Gaussian densities/sampling and finite differences.

Everything here is small-dimensional (state dimension ``2d`` with ``d`` in
{1, 2, 3}), so matrices are dense numpy arrays and batched operations loop
over the matrix dimension rather than over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))


def sym_matrix(entries) -> np.ndarray:
    """Validate and return a symmetric matrix (exact symmetry as stored)."""
    m = np.array(entries, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {m.shape}")
    if not np.array_equal(m, m.T):
        raise ValueError("matrix is not exactly symmetric")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[-1]

    def logdet(self) -> np.ndarray:
        return 2.0 * np.sum(np.log(np.diagonal(self.lower, axis1=-2, axis2=-1)), axis=-1)


@dataclass(frozen=True)
class FiniteDiffScheme:
    order: int = 1
    scale: float | None = None

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("finite-difference order must be 1 or 2")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("finite-difference scale must be positive")

    @property
    def step_scale(self) -> float:
        if self.scale is not None:
            return self.scale
        return 1e-5 if self.order == 1 else 1e-4

    def steps(self, point: np.ndarray) -> np.ndarray:
        return self.step_scale * np.maximum(1.0, np.abs(point))


def jitter_schedule(max_diag: float, max_jitter: float):
    """Yield 0, eps, 2 eps, 4 eps, ... up to ``max_jitter`` (eps = 1e-12 * max_diag)."""
    yield 0.0
    eps = 1e-12 * max_diag if max_diag > 0 else 1e-300
    j = eps
    while j <= max_jitter:
        yield j
        j *= 2.0


def cholesky_with_jitter(m, max_jitter: float = 0.0) -> CholeskyFactor:
    """Cholesky factor of ``m + j*I`` for the smallest scheduled jitter ``j`` that works."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if max_jitter < 0:
        raise ValueError("max_jitter must be nonnegative")
    eye = np.eye(m.shape[0])
    max_diag = float(np.max(np.abs(np.diag(m)))) if m.size else 0.0
    for j in jitter_schedule(max_diag, max_jitter):
        try:
            lower = np.linalg.cholesky(m + j * eye if j else m)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(lower)) and np.all(np.diag(lower) > 0):
            return CholeskyFactor(lower, j)
    raise NotPositiveDefinite(
        f"matrix not positive definite even with jitter {max_jitter:g}"
    )


def batch_cholesky(mats: np.ndarray, rel_jitter: float = 1e-8) -> np.ndarray:
    """Cholesky factors of a stack of matrices.

    Matrices that fail the plain factorization fall back to
    :func:`cholesky_with_jitter` with ``max_jitter = rel_jitter * max diag``.
    """
    mats = np.asarray(mats, dtype=float)
    try:
        lower = np.linalg.cholesky(mats)
        if np.all(np.isfinite(lower)):
            return lower
    except np.linalg.LinAlgError:
        pass
    flat = mats.reshape((-1,) + mats.shape[-2:])
    out = np.empty_like(flat)
    for k, m in enumerate(flat):
        max_diag = float(np.max(np.abs(np.diag(m))))
        out[k] = cholesky_with_jitter(m, rel_jitter * max_diag).lower
    return out.reshape(mats.shape)


def solve_lower(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution ``L x = b`` broadcast over leading axes of both."""
    n = lower.shape[-1]
    b = np.asarray(b, dtype=float)
    x = np.empty(np.broadcast_shapes(lower.shape[:-1], b.shape), dtype=float)
    for i in range(n):
        acc = b[..., i].copy()
        for k in range(i):
            acc = acc - lower[..., i, k] * x[..., k]
        x[..., i] = acc / lower[..., i, i]
    return x


def solve_lower_t(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution ``L^T x = b``."""
    n = lower.shape[-1]
    b = np.asarray(b, dtype=float)
    x = np.empty(np.broadcast_shapes(lower.shape[:-1], b.shape), dtype=float)
    for i in range(n - 1, -1, -1):
        acc = b[..., i].copy()
        for k in range(i + 1, n):
            acc = acc - lower[..., k, i] * x[..., k]
        x[..., i] = acc / lower[..., i, i]
    return x


def chol_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(L L^T)^{-1} b`` by two triangular solves."""
    return solve_lower_t(lower, solve_lower(lower, b))


def mvn_logpdf(mean, chol: CholeskyFactor, point) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    point = np.asarray(point, dtype=float)
    dim = chol.dim
    if mean.shape[-1] != dim or point.shape[-1] != dim:
        raise DimensionMismatch(
            f"mean {mean.shape} / point {point.shape} incompatible with dim {dim}"
        )
    z = solve_lower(chol.lower, point - mean)
    quad = np.sum(z * z, axis=-1)
    return -0.5 * (dim * LOG_2PI + chol.logdet() + quad)


def mvn_sample(mean, chol: CholeskyFactor, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws ``mean + L z`` with ``z`` standard normal, shape ``(n, dim)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (chol.dim,):
        raise DimensionMismatch(f"mean shape {mean.shape} vs dim {chol.dim}")
    z = rng.standard_normal((n, chol.dim))
    return mean + z @ chol.lower.T


def central_diff(f, scheme: FiniteDiffScheme, point) -> np.ndarray:
    """Central-difference gradient (order 1) or Hessian (order 2) of a scalar field."""
    x = np.atleast_1d(np.asarray(point, dtype=float))
    h = scheme.steps(x)
    n = x.size
    eye = np.eye(n)
    if scheme.order == 1:
        grad = np.empty(n)
        for i in range(n):
            e = h[i] * eye[i]
            grad[i] = (f(x + e) - f(x - e)) / (2.0 * h[i])
        return grad
    hess = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = h[i] * eye[i]
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = h[j] * eye[j]
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                4.0 * h[i] * h[j]
            )
            hess[i, j] = hess[j, i] = v
    return hess
