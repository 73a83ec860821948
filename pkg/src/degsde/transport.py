"""Transport curve, resolvent, and mean/covariance of the frozen Gaussian system.

A :class:`FrozenFrame` is built for a freezing datum ``(tau, xi)``; ``xi`` may
carry leading batch axes, in which case every accessor returns arrays with the
same leading axes (one frame per freezing point, sharing the time grid).
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, split
from .errors import DegenerateCovariance, NotPositiveDefinite, OutOfGrid, ReversedInterval
from .gaussian_core import batch_cholesky, symmetrize

TIME_TOL = 1e-12


@dataclass(frozen=True)
class ODEGridConfig:
    steps_per_unit_time: int = 64
    min_cov_intervals: int = 8
    cov_jitter: float = 1e-8

    def __post_init__(self):
        if self.steps_per_unit_time < 1:
            raise ValueError("steps_per_unit_time must be positive")
        if self.min_cov_intervals < 2 or self.min_cov_intervals % 2:
            raise ValueError("min_cov_intervals must be an even integer >= 2")


def _hermite(grid, vals, ders, r):
    """Cubic Hermite interpolation of node data at times ``r`` (1-d array)."""
    n = grid.size - 1
    h = grid[1] - grid[0]
    k = np.clip(np.floor((r - grid[0]) / h).astype(int), 0, n - 1)
    u = (r - grid[k]) / h
    u2, u3 = u * u, u * u * u
    h00 = 2 * u3 - 3 * u2 + 1
    h10 = u3 - 2 * u2 + u
    h01 = -2 * u3 + 3 * u2
    h11 = u3 - u2
    extra = (1,) * (vals.ndim - 1)
    w = [c.reshape(c.shape + extra) for c in (h00, h10 * h, h01, h11 * h)]
    return w[0] * vals[k] + w[1] * ders[k] + w[2] * vals[k + 1] + w[3] * ders[k + 1]


@dataclass(eq=False)
class FrozenFrame:
    coeffs: CoefficientSet
    tau: float
    xi: np.ndarray
    T: float
    grid: np.ndarray
    theta_nodes: np.ndarray
    dtheta_nodes: np.ndarray
    integ_nodes: np.ndarray
    dinteg_nodes: np.ndarray
    cfg: ODEGridConfig
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def d(self) -> int:
        return self.coeffs.d

    @property
    def batch_shape(self) -> tuple:
        return self.xi.shape[:-1]

    def _check(self, *times):
        for v in times:
            if v < self.tau - TIME_TOL or v > self.T + TIME_TOL:
                raise OutOfGrid(f"time {v!r} outside frame interval [{self.tau}, {self.T}]")

    def _order(self, t, s):
        self._check(t, s)
        if t > s:
            raise ReversedInterval(f"reversed interval: t={t!r} > s={s!r}")

    def _interp(self, vals, ders, r):
        r = np.clip(np.asarray(r, dtype=float), self.tau, self.T)
        if self.grid.size == 1:
            return np.broadcast_to(vals[0], r.shape + vals.shape[1:]).copy()
        return _hermite(self.grid, vals, ders, r)

    def theta(self, s) -> np.ndarray:
        """Transport value at time(s) ``s``; shape ``s.shape + batch + (2d,)``."""
        s_arr = np.asarray(s, dtype=float)
        for v in np.atleast_1d(s_arr):
            self._check(float(v))
        if s_arr.ndim == 0:
            if s_arr == self.tau:
                return self.xi.copy()
            return self._interp(self.theta_nodes, self.dtheta_nodes, s_arr[None])[0]
        return self._interp(self.theta_nodes, self.dtheta_nodes, s_arr)

    def _integ(self, r):
        return self._interp(self.integ_nodes, self.dinteg_nodes, r)

    def resolvent(self, t: float, r: float) -> np.ndarray:
        """``R_{t,r} = int_t^r D1F2(v, theta_v) dv``; shape ``batch + (d, d)``."""
        self._order(t, r)
        if t == r:
            return np.zeros(self.batch_shape + (self.d, self.d))
        vals = self._integ(np.array([t, r]))
        return vals[1] - vals[0]

    def mean(self, t: float, s: float, x) -> np.ndarray:
        """Mean of the frozen process at ``s`` started from ``x`` at ``t``.

        Uses the identity m1 = x1 + theta1(s) - theta1(t) and
        m2 = x2 + theta2(s) - theta2(t) + R_{t,s}(x1 - theta1(t)), obtained by
        integrating the frozen drift in closed form along the transport.
        """
        self._order(t, s)
        x = np.asarray(x, dtype=float)
        if t == s:
            return np.broadcast_to(x, np.broadcast_shapes(x.shape, self.xi.shape)).copy()
        d = self.d
        th = self.theta(np.array([t, s]))
        x1, x2 = split(x, d)
        r = self.resolvent(t, s)
        m1 = x1 + th[1, ..., :d] - th[0, ..., :d]
        m2 = x2 + th[1, ..., d:] - th[0, ..., d:] + np.einsum("...ij,...j->...i", r, x1 - th[0, ..., :d])
        return np.concatenate([m1, m2], axis=-1)

    def mean_map(self, t: float, s: float):
        """``(A, b)`` with ``mean(t, s, x) = A x + b``; ``A = [[I, 0], [R_{t,s}, I]]``."""
        d = self.d
        r = self.resolvent(t, s)
        th = self.theta(np.array([t, s]))
        eye = np.broadcast_to(np.eye(d), r.shape)
        zero = np.zeros_like(r)
        a = np.concatenate(
            [np.concatenate([eye, zero], axis=-1), np.concatenate([r, eye], axis=-1)], axis=-2
        )
        b1 = th[1, ..., :d] - th[0, ..., :d]
        b2 = th[1, ..., d:] - th[0, ..., d:] - np.einsum("...ij,...j->...i", r, th[0, ..., :d])
        return a, np.concatenate([b1, b2], axis=-1)

    def covariance(self, t: float, s: float) -> np.ndarray:
        """Covariance of the frozen process between ``t`` and ``s``; ``batch + (2d, 2d)``.

        Integrand M(r) a(r, theta_r) M(r)^T with M(r) = [I; R_{r,s}], integrated
        by composite Simpson on a uniform sub-grid of [t, s].
        """
        self._order(t, s)
        key = ("cov", float(t), float(s))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        d = self.d
        if t == s:
            out = np.zeros(self.batch_shape + (2 * d, 2 * d))
        else:
            n = max(self.cfg.min_cov_intervals,
                    2 * math.ceil(self.cfg.steps_per_unit_time * (s - t) / 2))
            r = np.linspace(t, s, n + 1)
            r[-1] = s
            th = self._interp(self.theta_nodes, self.dtheta_nodes, r)
            integ = self._integ(r)
            res = integ[-1] - integ  # R_{r,s}
            th1, th2 = split(th, d)
            a = self.coeffs.a(r.reshape((-1,) + (1,) * len(self.batch_shape)), th1, th2)
            ra = res @ a
            top_left = a
            bottom_left = ra
            bottom_right = ra @ np.swapaxes(res, -1, -2)
            w = np.ones(n + 1)
            w[1:-1:2] = 4.0
            w[2:-1:2] = 2.0
            w *= (s - t) / (3.0 * n)

            def integrate(block):
                return np.tensordot(w, block, axes=1)

            c11 = symmetrize(integrate(top_left))
            c21 = integrate(bottom_left)
            c22 = symmetrize(integrate(bottom_right))
            out = np.concatenate(
                [np.concatenate([c11, np.swapaxes(c21, -1, -2)], axis=-1),
                 np.concatenate([c21, c22], axis=-1)],
                axis=-2,
            )
        with self._lock:
            self._cache.setdefault(key, out)
        return self._cache[key]

    def cholesky(self, t: float, s: float) -> np.ndarray:
        """Lower Cholesky factor of ``covariance(t, s)`` with small relative jitter."""
        key = ("chol", float(t), float(s))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if t == s:
            raise DegenerateCovariance("covariance vanishes on an empty interval")
        cov = self.covariance(t, s)
        try:
            lower = batch_cholesky(cov, rel_jitter=self.cfg.cov_jitter)
        except NotPositiveDefinite as exc:
            raise DegenerateCovariance(str(exc)) from exc
        with self._lock:
            self._cache.setdefault(key, lower)
        return self._cache[key]


def solve_transport(coeffs: CoefficientSet, tau: float, xi, T: float,
                    cfg: ODEGridConfig | None = None) -> FrozenFrame:
    """Integrate the transport ODE and the running integral of D1F2 from ``tau`` to ``T``.

    Classical RK4 on the augmented state (theta, I) with I' = D1F2(s, theta);
    for the quadrature component this is composite Simpson with midpoints.
    """
    cfg = cfg or ODEGridConfig()
    if tau > T:
        raise ReversedInterval(f"freezing time {tau!r} exceeds horizon {T!r}")
    d = coeffs.d
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 2 * d:
        raise ValueError(f"freezing point must have last axis 2d = {2 * d}, got {xi.shape}")
    n = math.ceil(cfg.steps_per_unit_time * (T - tau) - 1e-9) if T > tau else 0
    grid = np.linspace(tau, T, n + 1) if n else np.array([float(tau)])

    def rhs(s, th):
        th1, th2 = split(th, d)
        return coeffs.drift(s, th), coeffs.d1f2(s, th1, th2)

    theta = np.empty((n + 1,) + xi.shape)
    dtheta = np.empty_like(theta)
    integ = np.empty((n + 1,) + xi.shape[:-1] + (d, d))
    dinteg = np.empty_like(integ)
    theta[0] = xi
    integ[0] = 0.0
    dtheta[0], dinteg[0] = rhs(grid[0], xi)
    for k in range(n):
        s, h = grid[k], grid[k + 1] - grid[k]
        y = theta[k]
        f1, g1 = dtheta[k], dinteg[k]
        f2, g2 = rhs(s + h / 2, y + h / 2 * f1)
        f3, g3 = rhs(s + h / 2, y + h / 2 * f2)
        f4, g4 = rhs(s + h, y + h * f3)
        theta[k + 1] = y + h / 6 * (f1 + 2 * f2 + 2 * f3 + f4)
        integ[k + 1] = integ[k] + h / 6 * (g1 + 2 * g2 + 2 * g3 + g4)
        dtheta[k + 1], dinteg[k + 1] = rhs(grid[k + 1], theta[k + 1])
    return FrozenFrame(coeffs, float(tau), xi.copy(), float(T), grid, theta, dtheta,
                       integ, dinteg, cfg)


def resolvent(frame: FrozenFrame, t: float, r: float) -> np.ndarray:
    return frame.resolvent(t, r)


def mean(frame: FrozenFrame, t: float, s: float, x) -> np.ndarray:
    return frame.mean(t, s, x)


def covariance(frame: FrozenFrame, t: float, s: float) -> np.ndarray:
    return frame.covariance(t, s)


def kolmogorov_covariance(alpha: float, s: float) -> np.ndarray:
    """Closed-form covariance of (W_s, alpha int_0^s W_r dr)."""
    if not s > 0:
        raise ValueError("s must be positive")
    return np.array([[s, alpha * s ** 2 / 2.0], [alpha * s ** 2 / 2.0, alpha ** 2 * s ** 3 / 3.0]])
