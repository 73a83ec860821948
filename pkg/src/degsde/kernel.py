"""Frozen Gaussian transition density, its derivatives, bounds and generators.

The log-density of the frozen kernel is a quadratic form in the joint variable
``z = (x, y)``: with ``m(x) = A x + b``, ``P = Sigma^{-1}`` and
``v = P (y - m)``, its gradient is ``(A^T v, -v)`` and its Hessian is the
constant matrix ``[[-A^T P A, A^T P], [P A, -P]]``. Every derivative of the
density is therefore the density times a polynomial in these two objects.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet, split
from .errors import UnsupportedOrder, ZeroAlpha
from .gaussian_core import LOG_2PI, chol_solve, solve_lower, solve_lower_t
from .transport import FrozenFrame


@dataclass(frozen=True)
class DerivOrder:
    """Numbers of derivatives taken in x1, x2, y1 and y2."""

    n_x1: int = 0
    n_x2: int = 0
    n_y1: int = 0
    n_y2: int = 0

    def __post_init__(self):
        counts = (self.n_x1, self.n_x2, self.n_y1, self.n_y2)
        if min(counts) < 0:
            raise UnsupportedOrder(f"negative derivative count in {counts}")
        if self.n_x1 > 2 or self.n_x2 > 1 or self.n_y1 > 1 or self.n_y2 > 1 or sum(counts) > 3:
            raise UnsupportedOrder(f"derivative order {counts} is not supported")

    @property
    def total(self) -> int:
        return self.n_x1 + self.n_x2 + self.n_y1 + self.n_y2

    def slots(self) -> list[int]:
        """Variable blocks (0: x1, 1: x2, 2: y1, 3: y2), one entry per derivative."""
        return [0] * self.n_x1 + [1] * self.n_x2 + [2] * self.n_y1 + [3] * self.n_y2

    def scaling_exponent(self, d: int = 1) -> float:
        """Predicted power of (s - t) for the sup over y of this derivative."""
        return -2 * d - (3 * (self.n_x2 + self.n_y2) + self.n_x1 + self.n_y1) / 2.0


ADMISSIBLE_ORDERS = tuple(
    DerivOrder(a, b, c)
    for a, b, c in itertools.product(range(3), range(2), range(2))
    if a + b + c <= 3
)

VALUE = DerivOrder()
D_X1 = DerivOrder(n_x1=1)
D_X2 = DerivOrder(n_x2=1)
D_Y1 = DerivOrder(n_y1=1)
D_Y2 = DerivOrder(n_y2=1)


@dataclass
class KernelEval:
    value: np.ndarray
    derivatives: dict = field(default_factory=dict)


@dataclass
class _Geometry:
    value: np.ndarray
    grad: np.ndarray  # (..., 4d)
    hess: np.ndarray  # (..., 4d, 4d)
    d: int


def _precision(lower: np.ndarray) -> np.ndarray:
    n = lower.shape[-1]
    eye = np.eye(n)
    cols = [chol_solve(lower, np.broadcast_to(eye[k], lower.shape[:-1])) for k in range(n)]
    p = np.stack(cols, axis=-1)
    return 0.5 * (p + np.swapaxes(p, -1, -2))


def _log_density(frame: FrozenFrame, t, x, s, y):
    lower = frame.cholesky(t, s)
    m = frame.mean(t, s, x)
    diff = np.asarray(y, dtype=float) - m
    z = solve_lower(lower, diff)
    logdet = 2.0 * np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1)
    dim = lower.shape[-1]
    return -0.5 * (dim * LOG_2PI + logdet + np.sum(z * z, axis=-1)), lower, z


def qtilde_density(frame: FrozenFrame, t: float, x, s: float, y) -> np.ndarray:
    """Frozen Gaussian transition density from (t, x) to (s, y)."""
    logq, _, _ = _log_density(frame, t, x, s, y)
    return np.exp(logq)


def _geometry(frame: FrozenFrame, t, x, s, y) -> _Geometry:
    logq, lower, z = _log_density(frame, t, x, s, y)
    v = solve_lower_t(lower, z)
    a, _ = frame.mean_map(t, s)
    p = _precision(lower)
    at = np.swapaxes(a, -1, -2)
    atp = at @ p
    grad = np.concatenate([np.einsum("...ij,...j->...i", at, v), -v], axis=-1)
    top = np.concatenate([-atp @ a, atp], axis=-1)
    bottom = np.concatenate([np.swapaxes(atp, -1, -2), -p], axis=-1)
    hess = np.concatenate([top, bottom], axis=-2)
    return _Geometry(np.exp(logq), grad, hess, frame.d)


def _assemble(geo: _Geometry, order: DerivOrder) -> np.ndarray:
    d = geo.d
    idx = [np.arange(k * d, (k + 1) * d) for k in order.slots()]
    q = geo.value
    k = len(idx)
    if k == 0:
        return q
    g = [geo.grad[..., i] for i in idx]

    def h(i, j):
        block = geo.hess[..., idx[i], :][..., :, idx[j]]
        return np.broadcast_to(block, q.shape + (d, d))

    if k == 1:
        poly = g[0]
    elif k == 2:
        poly = g[0][..., :, None] * g[1][..., None, :] + h(0, 1)
    else:
        poly = (
            g[0][..., :, None, None] * g[1][..., None, :, None] * g[2][..., None, None, :]
            + h(0, 1)[..., :, :, None] * g[2][..., None, None, :]
            + h(0, 2)[..., :, None, :] * g[1][..., None, :, None]
            + h(1, 2)[..., None, :, :] * g[0][..., :, None, None]
        )
    return q.reshape(q.shape + (1,) * k) * poly


def derivative_factor(frame: FrozenFrame, t: float, x, s: float, y, order: DerivOrder) -> np.ndarray:
    """Ratio of the ``order`` derivative of the density to the density itself.

    This is a polynomial in ``(x, y)``, so integrals against derivative
    kernels can be computed by Gaussian quadrature in whitened coordinates.
    """
    geo = _geometry(frame, t, x, s, y)
    geo.value = np.ones_like(geo.value)
    return _assemble(geo, order)


def qtilde_eval(frame: FrozenFrame, t: float, x, s: float, y, orders=()) -> KernelEval:
    """Density and several analytic derivatives sharing one factorization."""
    geo = _geometry(frame, t, x, s, y)
    return KernelEval(geo.value, {o: _assemble(geo, o) for o in orders})


def qtilde_derivative(frame: FrozenFrame, t: float, x, s: float, y, order: DerivOrder,
                      analytic: bool = True, fd_scale: float | None = None) -> np.ndarray:
    """Derivative of the frozen density; tensor axes follow ``order.slots()``.

    With ``analytic=False`` the derivative is computed by nested central
    differences of :func:`qtilde_density`. The step along each coordinate is
    ``fd_scale`` times the standard deviation of the matching block of the
    covariance (x1 and y1 share block 1, x2 and y2 share block 2); the default
    scale is 1e-5, 1e-4 or 3e-4 for total order 1, 2 or 3.
    """
    if not isinstance(order, DerivOrder):
        raise UnsupportedOrder(f"expected a DerivOrder, got {order!r}")
    if analytic:
        return _assemble(_geometry(frame, t, x, s, y), order)
    return _fd_derivative(frame, t, x, s, y, order, fd_scale)


def _fd_derivative(frame, t, x, s, y, order, fd_scale):
    d = frame.d
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    z0 = np.concatenate([x, y], axis=-1)
    scale = fd_scale if fd_scale is not None else {0: 0.0, 1: 1e-5, 2: 1e-4, 3: 3e-4}[order.total]
    sd = np.sqrt(np.diagonal(frame.covariance(t, s), axis1=-2, axis2=-1))
    steps = scale * np.concatenate([sd, sd], axis=-1)  # (..., 4d)

    def f(z):
        return qtilde_density(frame, t, z[..., : 2 * d], s, z[..., 2 * d:])

    slots = order.slots()
    if not slots:
        return f(z0)
    out_shape = f(z0).shape + (d,) * len(slots)
    out = np.empty(out_shape)
    for comps in itertools.product(range(d), repeat=len(slots)):
        axes = [blk * d + c for blk, c in zip(slots, comps)]
        acc = 0.0
        for signs in itertools.product((1.0, -1.0), repeat=len(axes)):
            z = z0.copy()
            for ax, sg in zip(axes, signs):
                z[..., ax] += sg * steps[..., ax]
            acc = acc + np.prod(signs) * f(z)
        denom = 1.0
        for ax in axes:
            denom = denom * 2.0 * steps[..., ax]
        out[(...,) + comps] = acc / denom
    return out


def qhat_bound(frame: FrozenFrame, t: float, x, s: float, y, c: float) -> np.ndarray:
    """Anisotropic Gaussian majorant ``c h^{-2d} exp(-c(|y1-m1|^2/h + |y2-m2|^2/h^3))``."""
    h = s - t
    d = frame.d
    diff = np.asarray(y, dtype=float) - frame.mean(t, s, x)
    e1 = np.sum(diff[..., :d] ** 2, axis=-1) / h
    e2 = np.sum(diff[..., d:] ** 2, axis=-1) / h ** 3
    return c / h ** (2 * d) * np.exp(-c * (e1 + e2))


def kolmogorov_density(alpha: float, s: float, x, y) -> np.ndarray:
    """Closed-form density of (x1 + W_s, x2 + alpha(s x1 + int_0^s W_r dr)), d = 1."""
    if alpha == 0:
        raise ZeroAlpha("alpha must be nonzero")
    if not s > 0:
        raise ValueError("s must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = y[..., 0] - x[..., 0]
    w = y[..., 1] - x[..., 1] - s * alpha * x[..., 0]
    # inverse of [[s, a s^2/2], [a s^2/2, a^2 s^3/3]]
    quad = 4.0 * u * u / s - 12.0 * u * w / (alpha * s * s) + 12.0 * w * w / (alpha ** 2 * s ** 3)
    return math.sqrt(3.0) / (abs(alpha) * math.pi * s * s) * np.exp(-0.5 * quad)


def whitened_points(frame: FrozenFrame, t: float, x, s: float, z) -> np.ndarray:
    """Map standard coordinates ``z`` to ``y = mean + L z`` with ``L L^T = Sigma``."""
    lower = frame.cholesky(t, s)
    m = frame.mean(t, s, x)
    z = np.asarray(z, dtype=float)
    return m + np.einsum("...ij,...j->...i", lower, z)


# --------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class SmoothField:
    """Scalar field given through its derivative maps ``(t, x) -> array``.

    ``d1`` and ``d2`` return gradients in x1 and x2 (shape (..., d)); ``d11``
    returns the x1 Hessian (shape (..., d, d)). ``value`` and ``dt`` are
    optional.
    """

    d1: Callable
    d2: Callable
    d11: Callable
    value: Callable | None = None
    dt: Callable | None = None


def apply_generator(coeffs: CoefficientSet, psi: SmoothField, t, x) -> np.ndarray:
    """``1/2 Tr(a D^2_{x1} psi) + F1 . D_{x1} psi + F2 . D_{x2} psi``."""
    x1, x2 = split(x, coeffs.d)
    a = coeffs.a(t, x1, x2)
    return (
        0.5 * np.einsum("...ij,...ji->...", a, psi.d11(t, x))
        + np.sum(coeffs.F1(t, x1, x2) * psi.d1(t, x), axis=-1)
        + np.sum(coeffs.F2(t, x1, x2) * psi.d2(t, x), axis=-1)
    )


def apply_frozen_generator(frame: FrozenFrame, psi: SmoothField, t, x) -> np.ndarray:
    """Generator of the system linearized along the frame transport, at time ``t``."""
    coeffs = frame.coeffs
    d = coeffs.d
    th = frame.theta(t)
    th1, th2 = split(th, d)
    x1, _ = split(x, d)
    a = coeffs.a(t, th1, th2)
    drift2 = coeffs.F2(t, th1, th2) + np.einsum(
        "...ij,...j->...i", coeffs.d1f2(t, th1, th2), x1 - th1
    )
    return (
        0.5 * np.einsum("...ij,...ji->...", a, psi.d11(t, x))
        + np.sum(coeffs.F1(t, th1, th2) * psi.d1(t, x), axis=-1)
        + np.sum(drift2 * psi.d2(t, x), axis=-1)
    )
