"""Parametrix representation of the degenerate backward PDE and its Picard solver.

Sign convention: the solver targets

    d_t u + L u + phi = 0 on [0, T),   u(T, .) = 0,

whose Duhamel formula along the frozen process reads

    u(t, x) = int_t^T int [phi + (L - L_frozen) u](s, y) q(t, x; s, y) dy ds.

The four integrands are phi, 1/2 Tr[(a(y) - a(theta)) D^2_{y1} u],
(F1(y) - F1(theta)) . D_{y1} u and
(F2(y) - F2(theta) - D1F2(theta)(y1 - theta1)) . D_{y2} u.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet, split
from .errors import (InadmissibleVariant, InvalidGamma, MissingDerivativeField, NoContraction,
                     QuadratureBudgetExceeded)
from .kernel import DerivOrder, SmoothField, derivative_factor, apply_generator
from .sde_sim import frozen_simulate
from .transport import FrozenFrame, ODEGridConfig, solve_transport

Field = Callable[[float, np.ndarray], np.ndarray]


# --------------------------------------------------------------------------
# perturbation operators


def delta_apply(kind: str, zeta, f: Field, s, y) -> np.ndarray:
    """Perturbation of ``f`` around ``zeta``.

    ``kind="full"``: f(s, y) - f(s, zeta); ``kind="1"``: f(s, y1, zeta2) -
    f(s, zeta); ``kind="2"``: f(s, y) - f(s, y1, zeta2).
    """
    y = np.asarray(y, dtype=float)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), y.shape)
    d = y.shape[-1] // 2
    mixed = np.concatenate([y[..., :d], zeta[..., d:]], axis=-1)
    if kind == "full":
        return f(s, y) - f(s, zeta)
    if kind == "1":
        return f(s, mixed) - f(s, zeta)
    if kind == "2":
        return f(s, y) - f(s, mixed)
    raise ValueError(f"unknown perturbation kind {kind!r}")


# --------------------------------------------------------------------------
# quadrature rules


@dataclass(frozen=True)
class PicardConfig:
    max_iter: int = 30
    tol: float = 1e-6
    time_panels: int = 24
    panel_ratio: float = 0.5
    nodes_per_panel: int = 2
    space_nodes: int = 8
    space_rule: str = "hermite"
    legendre_halfwidth: float = 8.0
    max_points: int = 2_000_000_000
    steps_per_unit_time: int = 64

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not 0 < self.panel_ratio < 1:
            raise ValueError("panel ratio must lie in (0, 1)")
        if self.space_rule not in ("hermite", "legendre"):
            raise ValueError("space_rule must be 'hermite' or 'legendre'")

    @property
    def ode(self) -> ODEGridConfig:
        return ODEGridConfig(self.steps_per_unit_time)


def time_rule(t: float, T: float, cfg: PicardConfig):
    """Gauss-Legendre nodes on panels shrinking geometrically toward ``s = t``."""
    if not T > t:
        return np.zeros(0), np.zeros(0)
    g, w = np.polynomial.legendre.leggauss(cfg.nodes_per_panel)
    length = T - t
    cuts = [t + length * cfg.panel_ratio ** j for j in range(cfg.time_panels)] + [t]
    nodes, weights = [], []
    for hi, lo in zip(cuts[:-1], cuts[1:]):
        nodes.append(0.5 * (hi - lo) * g + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def space_rule(cfg: PicardConfig, dim: int, nodes: int | None = None):
    """Tensor rule for expectations under the standard normal law on R^dim."""
    n = nodes or cfg.space_nodes
    if cfg.space_rule == "hermite":
        g, w = np.polynomial.hermite_e.hermegauss(n)
        w = w / math.sqrt(2.0 * math.pi)
    else:
        g, w = np.polynomial.legendre.leggauss(n)
        g = cfg.legendre_halfwidth * g
        w = cfg.legendre_halfwidth * w * np.exp(-0.5 * g * g) / math.sqrt(2.0 * math.pi)
    grids = np.meshgrid(*([g] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    z = np.stack([a.ravel() for a in grids], axis=-1)
    weights = np.prod(np.stack([a.ravel() for a in wgrids], axis=-1), axis=-1)
    return z, weights


def _points(frame: FrozenFrame, t: float, x, s: float, z):
    """Quadrature points ``y = m + L z``; shape batch + (Q, 2d)."""
    m = frame.mean(t, s, x)
    lower = frame.cholesky(t, s)
    return m[..., None, :] + np.einsum("...ij,qj->...qi", lower, z)


def derivative_integral(frame: FrozenFrame, t: float, x, s: float, f: Field,
                        order: DerivOrder, nodes: int = 48,
                        cfg: PicardConfig | None = None) -> np.ndarray:
    """``int f(s, y) D^order q(t, x; s, y) dy`` by quadrature in whitened coordinates."""
    cfg = cfg or PicardConfig()
    z, w = space_rule(cfg, 2 * frame.d, nodes)
    y = _points(frame, t, x, s, z)
    xb = np.asarray(x, dtype=float)[..., None, :]
    vals = np.asarray(f(s, y), dtype=float)
    if order.total:
        fac = derivative_factor(frame, t, xb, s, y, order)
        vals = vals.reshape(vals.shape + (1,) * (fac.ndim - vals.ndim)) * fac
    return np.tensordot(w, np.moveaxis(vals, y.ndim - 2, 0), axes=1)


# --------------------------------------------------------------------------
# derivative fields on a grid


@dataclass(frozen=True)
class GridSpec:
    T: float
    n_time: int = 11
    n_space: int = 41
    half_width: float = 3.0
    d: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon must be positive")
        if self.n_time < 2 or self.n_space < 4:
            raise ValueError("grid too small")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_time)

    @property
    def axes(self) -> list[np.ndarray]:
        ax = np.linspace(-self.half_width, self.half_width, self.n_space)
        return [ax] * (2 * self.d)

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)


def _second_diff(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    u = np.moveaxis(u, axis, 0)
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h ** 2
    out[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / h ** 2
    out[-1] = (2.0 * u[-1] - 5.0 * u[-2] + 4.0 * u[-3] - u[-4]) / h ** 2
    return np.moveaxis(out, 0, axis)


def stencil_fields(u: np.ndarray, axes, d: int) -> dict[str, np.ndarray]:
    """Grid derivative fields of ``u`` (shape (n_time, *space)).

    Central differences inside, second-order one-sided at box edges.
    """
    hs = [ax[1] - ax[0] for ax in axes]
    grads = [np.gradient(u, hs[k], axis=1 + k, edge_order=2) for k in range(2 * d)]
    d1 = np.stack(grads[:d], axis=-1)
    d2 = np.stack(grads[d:], axis=-1)
    d11 = np.empty(u.shape + (d, d))
    d12 = np.empty(u.shape + (d, d))
    for i in range(d):
        for j in range(d):
            if i == j:
                d11[..., i, j] = _second_diff(u, hs[i], 1 + i)
            else:
                d11[..., i, j] = np.gradient(grads[i], hs[j], axis=1 + j, edge_order=2)
            d12[..., i, j] = np.gradient(grads[i], hs[d + j], axis=1 + d + j, edge_order=2)
    return {"D1u": d1, "D2u": d2, "D1sqU": d11, "D1D2u": d12}


class GridFields:
    """Piecewise-linear (time) and multilinear (space) interpolation of grid fields.

    Points outside the box take the value at the nearest box point.
    """

    def __init__(self, times, axes, d: int, u: np.ndarray, fields: dict | None = None):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.d = d
        self.u = u
        self.fields = fields if fields is not None else stencil_fields(u, self.axes, d)

    def _time_slice(self, arr, s):
        j = int(np.clip(np.searchsorted(self.times, s, side="right") - 1, 0, self.times.size - 2))
        w = (s - self.times[j]) / (self.times[j + 1] - self.times[j])
        w = min(max(w, 0.0), 1.0)
        return (1.0 - w) * arr[j] + w * arr[j + 1]

    def _space(self, sl, y):
        y = np.asarray(y, dtype=float)
        lead = y.shape[:-1]
        pts = y.reshape(-1, y.shape[-1])
        idx, frac = [], []
        for k, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            p = np.clip(pts[:, k], ax[0], ax[-1])
            i = np.clip(np.floor((p - ax[0]) / h).astype(int), 0, ax.size - 2)
            idx.append(i)
            frac.append((p - ax[i]) / h)
        out = 0.0
        tail = sl.shape[len(self.axes):]
        for corner in range(2 ** len(self.axes)):
            wgt = np.ones(pts.shape[0])
            sel = []
            for k in range(len(self.axes)):
                bit = (corner >> k) & 1
                wgt = wgt * (frac[k] if bit else 1.0 - frac[k])
                sel.append(idx[k] + bit)
            out = out + wgt.reshape((-1,) + (1,) * len(tail)) * sl[tuple(sel)]
        return np.asarray(out).reshape(lead + tail)

    def slice_at(self, name: str, s: float) -> np.ndarray:
        arr = self.u if name == "u" else self.fields[name]
        return self._time_slice(arr, s)

    def eval(self, name: str, s: float, y) -> np.ndarray:
        return self._space(self.slice_at(name, s), y)

    def value(self, s, y):
        return self.eval("u", s, y)

    def d1(self, s, y):
        return self.eval("D1u", s, y)

    def d2(self, s, y):
        return self.eval("D2u", s, y)

    def d11(self, s, y):
        return self.eval("D1sqU", s, y)

    def d12(self, s, y):
        return self.eval("D1D2u", s, y)


class ZeroFields:
    """Derivative fields of the zero function."""

    def __init__(self, d: int):
        self.d = d

    def d1(self, s, y):
        return np.zeros(np.shape(y)[:-1] + (self.d,))

    d2 = d1

    def d11(self, s, y):
        return np.zeros(np.shape(y)[:-1] + (self.d, self.d))


def _field(u_fields, name):
    fn = getattr(u_fields, name, None)
    if fn is None:
        raise MissingDerivativeField(f"derivative field {name} is not available")
    return fn


# --------------------------------------------------------------------------
# integrands


@dataclass
class IntegrandTerms:
    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray
    h4: np.ndarray
    h2_flux: np.ndarray | None = None  # centered form only, shape (..., d)

    def total(self) -> np.ndarray:
        return self.h1 + self.h2 + self.h3 + self.h4


def _perturbation_coefficients(coeffs: CoefficientSet, s, y, theta):
    """(a(y) - a(theta), F1(y) - F1(theta), F2(y) - F2(theta) - D1F2(theta)(y1 - theta1))."""
    d = coeffs.d
    y1, y2 = split(y, d)
    t1, t2 = split(theta, d)
    da = coeffs.a(s, y1, y2) - coeffs.a(s, t1, t2)
    df1 = coeffs.F1(s, y1, y2) - coeffs.F1(s, t1, t2)
    df2 = (coeffs.F2(s, y1, y2) - coeffs.F2(s, t1, t2)
           - np.einsum("...ij,...j->...i", coeffs.d1f2(s, t1, t2), y1 - t1))
    return da, df1, df2


def _row_divergence(coeffs: CoefficientSet, s, y1, x2, step: float = 1e-5):
    """``sum_l d/dy1_l a_{l.}(s, y1, x2)`` by central differences; shape (..., d)."""
    d = coeffs.d
    out = 0.0
    for l in range(d):
        h = step * np.maximum(1.0, np.abs(y1[..., l]))
        e = np.zeros_like(y1)
        e[..., l] = h
        diff = (coeffs.a(s, y1 + e, x2) - coeffs.a(s, y1 - e, x2)) / (2.0 * h[..., None, None])
        out = out + diff[..., l, :]
    return out


def integrand_terms(coeffs: CoefficientSet, frame: FrozenFrame, u_fields, s: float, y,
                    centered: bool = False, phi: Field | None = None) -> IntegrandTerms:
    """The four integrands at (s, y), frozen along ``frame.theta(s)``.

    ``centered=True`` returns the forms used against x2-differentiated
    kernels: every term carries a factor that vanishes when y2 equals the
    transport's second block. ``h2_flux`` is the piece that multiplies the
    y1-derivative of the differentiated kernel.
    """
    d = coeffs.d
    y = np.asarray(y, dtype=float)
    theta = np.broadcast_to(frame.theta(s), y.shape)
    y1, y2 = split(y, d)
    t1, t2 = split(theta, d)
    mixed = np.concatenate([y1, t2], axis=-1)
    d1u, d2u, d11u = (_field(u_fields, n) for n in ("d1", "d2", "d11"))
    if phi is None:
        phi = lambda s_, y_: np.zeros(np.shape(y_)[:-1])  # noqa: E731
    if not centered:
        da, df1, df2 = _perturbation_coefficients(coeffs, s, y, theta)
        h1 = np.asarray(phi(s, y), dtype=float)
        h2 = 0.5 * np.einsum("...ij,...ji->...", da, d11u(s, y))
        h3 = np.sum(df1 * d1u(s, y), axis=-1)
        h4 = np.sum(df2 * d2u(s, y), axis=-1)
        return IntegrandTerms(h1, h2, h3, h4)

    h1 = delta_apply("2", theta, phi, s, y)
    a_y = coeffs.a(s, y1, y2)
    a_mix = coeffs.a(s, y1, t2)
    a_th = coeffs.a(s, t1, t2)
    d1_y, d1_mix = d1u(s, y), d1u(s, mixed)
    d2_y, d2_mix = d2u(s, y), d2u(s, mixed)
    dd1 = d1_y - d1_mix
    div = _row_divergence(coeffs, s, y1, t2)
    h2 = 0.5 * (np.einsum("...ij,...ji->...", a_y - a_mix, d11u(s, y)) - np.sum(div * dd1, axis=-1))
    flux = -0.5 * np.einsum("...lj,...j->...l", a_mix - a_th, dd1)
    f1_y, f1_mix, f1_th = (coeffs.F1(s, *split(p, d)) for p in (y, mixed, theta))
    h3 = np.sum((f1_y - f1_mix) * d1_y, axis=-1) + np.sum((f1_mix - f1_th) * dd1, axis=-1)
    f2_y, f2_mix, f2_th = (coeffs.F2(s, *split(p, d)) for p in (y, mixed, theta))
    lin = np.einsum("...ij,...j->...i", coeffs.d1f2(s, t1, t2), y1 - t1)
    h4 = (np.sum((f2_y - f2_mix) * d2_y, axis=-1)
          + np.sum((f2_mix - f2_th - lin) * (d2_y - d2_mix), axis=-1))
    return IntegrandTerms(h1, h2, h3, h4, flux)


def centered_derivative_integral(coeffs: CoefficientSet, frame: FrozenFrame, u_fields,
                                 t: float, x, s: float, n_x1: int = 0,
                                 phi: Field | None = None, nodes: int = 48) -> np.ndarray:
    """``D^n_{x1} D_{x2}`` of the spatial integral of all four terms, in centered form."""
    order = DerivOrder(n_x1=n_x1, n_x2=1)
    flux_order = DerivOrder(n_x1=n_x1, n_x2=1, n_y1=1)
    cfg = PicardConfig()
    z, w = space_rule(cfg, 2 * frame.d, nodes)
    y = _points(frame, t, x, s, z)
    xb = np.asarray(x, dtype=float)[..., None, :]
    terms = integrand_terms(coeffs, frame, u_fields, s, y, centered=True, phi=phi)
    fac = derivative_factor(frame, t, xb, s, y, order)
    main = terms.total().reshape(terms.h1.shape + (1,) * (fac.ndim - terms.h1.ndim)) * fac
    flux_fac = derivative_factor(frame, t, xb, s, y, flux_order)
    flux = np.sum(flux_fac * _expand_flux(terms.h2_flux, flux_fac), axis=-1)
    total = main + flux
    return np.tensordot(w, np.moveaxis(total, y.ndim - 2, 0), axes=1)


def _expand_flux(flux, fac):
    # flux (..., d) multiplies the trailing y1 axis of fac (..., [d]*k, d)
    extra = fac.ndim - flux.ndim
    return flux.reshape(flux.shape[:-1] + (1,) * extra + flux.shape[-1:])


# --------------------------------------------------------------------------
# centering identities


def centering_check(frame: FrozenFrame, f: Field, g: Field | None, order: DerivOrder,
                    variant: str, t: float, x, s: float, zeta=None, nodes: int = 48,
                    return_sides: bool = False):
    """Difference between a differentiated integral and its centered version.

    Variant ``a`` subtracts f(s, zeta); ``b`` replaces f by its perturbation in
    the second block; ``c`` replaces g by its second-block perturbation in the
    product (first-block perturbation of f) * g.
    """
    if order.n_y1 or order.n_y2:
        raise InadmissibleVariant("centering identities involve x-derivatives only")
    if variant == "a":
        if order.n_x1 + order.n_x2 == 0:
            raise InadmissibleVariant("variant a needs at least one x-derivative")
    elif variant in ("b", "c"):
        if order.n_x2 == 0:
            raise InadmissibleVariant(f"variant {variant} needs an x2-derivative")
    else:
        raise InadmissibleVariant(f"unknown variant {variant!r}")
    if zeta is None:
        zeta = frame.theta(s)
    zeta = np.asarray(zeta, dtype=float)

    if variant == "a":
        lhs_f = f
        rhs_f = lambda s_, y_: delta_apply("full", zeta, f, s_, y_)  # noqa: E731
    elif variant == "b":
        lhs_f = f
        rhs_f = lambda s_, y_: delta_apply("2", zeta, f, s_, y_)  # noqa: E731
    else:
        if g is None:
            raise InadmissibleVariant("variant c needs a second function g")
        lhs_f = lambda s_, y_: delta_apply("1", zeta, f, s_, y_) * g(s_, y_)  # noqa: E731
        rhs_f = lambda s_, y_: (delta_apply("1", zeta, f, s_, y_)  # noqa: E731
                                * delta_apply("2", zeta, g, s_, y_))
    lhs = derivative_integral(frame, t, x, s, lhs_f, order, nodes)
    rhs = derivative_integral(frame, t, x, s, rhs_f, order, nodes)
    res = float(np.max(np.abs(lhs - rhs)))
    if return_sides:
        return res, lhs, rhs
    return res


# --------------------------------------------------------------------------
# representation and Picard iteration


def _check_budget(n_points: int, cfg: PicardConfig):
    if n_points > cfg.max_points:
        raise QuadratureBudgetExceeded(
            f"{n_points} quadrature evaluations exceed the budget of {cfg.max_points}"
        )


def _source_part(frame: FrozenFrame, phi: Field, t: float, x, T: float, cfg: PicardConfig):
    s_nodes, s_w = time_rule(t, T, cfg)
    z, zw = space_rule(cfg, 2 * frame.d)
    out = np.zeros(np.broadcast_shapes(np.shape(x)[:-1], frame.batch_shape))
    for s, ws in zip(s_nodes, s_w):
        y = _points(frame, t, x, float(s), z)
        out = out + ws * (np.asarray(phi(float(s), y), dtype=float) @ zw)
    return out


def _perturbation_part(coeffs: CoefficientSet, frame: FrozenFrame, u_fields, t: float, x,
                       T: float, cfg: PicardConfig):
    s_nodes, s_w = time_rule(t, T, cfg)
    z, zw = space_rule(cfg, 2 * frame.d)
    out = np.zeros(np.broadcast_shapes(np.shape(x)[:-1], frame.batch_shape))
    for s, ws in zip(s_nodes, s_w):
        s = float(s)
        y = _points(frame, t, x, s, z)
        theta = frame.theta(s)[..., None, :]
        da, df1, df2 = _perturbation_coefficients(coeffs, s, y, np.broadcast_to(theta, y.shape))
        val = 0.0
        if np.any(da):
            val = val + 0.5 * np.einsum("...ij,...ji->...", da, _field(u_fields, "d11")(s, y))
        if np.any(df1):
            val = val + np.sum(df1 * _field(u_fields, "d1")(s, y), axis=-1)
        if np.any(df2):
            val = val + np.sum(df2 * _field(u_fields, "d2")(s, y), axis=-1)
        if np.ndim(val):
            out = out + ws * (val @ zw)
    return out


def representation_rhs(coeffs: CoefficientSet, u_fields, t: float, x, T: float,
                       cfg: PicardConfig | None = None, phi: Field | None = None,
                       xi=None) -> np.ndarray:
    """Right-hand side of the parametrix representation at (t, x).

    The frozen frame is built at ``(t, xi)`` with ``xi = x`` by default.
    ``x`` may carry leading batch axes.
    """
    cfg = cfg or PicardConfig()
    x = np.asarray(x, dtype=float)
    if t >= T:
        return np.zeros(x.shape[:-1])
    z_count = cfg.space_nodes ** (2 * coeffs.d)
    n_batch = int(np.prod(x.shape[:-1], dtype=int))
    _check_budget(n_batch * cfg.time_panels * cfg.nodes_per_panel * z_count, cfg)
    frame = solve_transport(coeffs, t, x if xi is None else xi, T, cfg.ode)
    out = _perturbation_part(coeffs, frame, u_fields, t, x, T, cfg)
    if phi is not None:
        out = out + _source_part(frame, phi, t, x, T, cfg)
    return out


@dataclass
class GridSolution:
    coeffs: CoefficientSet
    spec: GridSpec
    config: PicardConfig
    times: np.ndarray
    axes: list
    u: np.ndarray
    fields: dict
    iterations: int
    changes: list
    ratios: list

    @property
    def T(self) -> float:
        return self.spec.T

    @property
    def final_residual(self) -> float:
        return self.changes[-1] if self.changes else 0.0

    def grid_fields(self) -> GridFields:
        return GridFields(self.times, self.axes, self.coeffs.d, self.u, self.fields)

    def write_csv(self, path) -> None:
        if self.coeffs.d != 1:
            raise ValueError("CSV dump is defined for d = 1")
        x1, x2 = self.axes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x1", "x2", "u", "D1u", "D2u", "D1sqU", "D1D2u"])
            for k, t in enumerate(self.times):
                for i, a in enumerate(x1):
                    for j, b in enumerate(x2):
                        row = (t, a, b, self.u[k, i, j], self.fields["D1u"][k, i, j, 0],
                               self.fields["D2u"][k, i, j, 0], self.fields["D1sqU"][k, i, j, 0, 0],
                               self.fields["D1D2u"][k, i, j, 0, 0])
                        w.writerow([f"{v:.17g}" for v in row])


class ContractionMonitor:
    """Tracks sup-norm changes between Picard iterates.

    Raises :class:`NoContraction` once the change ratio exceeds 1 for
    ``patience`` consecutive iterations.
    """

    def __init__(self, T: float, patience: int = 3):
        self.T = T
        self.patience = patience
        self.changes: list[float] = []
        self.ratios: list[float] = []
        self._above = 0

    def record(self, change: float) -> None:
        if self.changes:
            prev = self.changes[-1]
            ratio = change / prev if prev > 0 else 0.0
            self.ratios.append(ratio)
            self._above = self._above + 1 if ratio > 1.0 else 0
        self.changes.append(change)
        if self._above >= self.patience:
            raise NoContraction(
                f"Picard change ratio exceeded 1 for {self.patience} consecutive iterations "
                f"(T = {self.T:g}); the horizon is likely too long", list(self.ratios))


def picard_solve(coeffs: CoefficientSet, phi: Field, T: float,
                 cfg: PicardConfig | None = None, grid: GridSpec | None = None) -> GridSolution:
    """Fixed point of the representation on a space-time grid, starting from u = 0."""
    cfg = cfg or PicardConfig()
    grid = grid or GridSpec(T)
    if abs(grid.T - T) > 1e-15:
        raise ValueError("grid horizon differs from T")
    d = coeffs.d
    times = grid.times
    axes = grid.axes
    nodes = grid.nodes().reshape(-1, 2 * d)
    space_shape = (grid.n_space,) * (2 * d)
    z_count = cfg.space_nodes ** (2 * d)
    per_sweep = (times.size - 1) * nodes.shape[0] * cfg.time_panels * cfg.nodes_per_panel * z_count
    _check_budget(per_sweep, cfg)

    frames = [solve_transport(coeffs, float(t), nodes, T, cfg.ode) for t in times[:-1]]
    source = np.zeros((times.size,) + space_shape)
    for k, (t, fr) in enumerate(zip(times[:-1], frames)):
        source[k] = _source_part(fr, phi, float(t), nodes, T, cfg).reshape(space_shape)

    u = np.zeros_like(source)
    monitor = ContractionMonitor(T)
    iterations = 0
    for it in range(cfg.max_iter):
        if it == 0:
            new = source.copy()
        else:
            fields = GridFields(times, axes, d, u)
            new = source.copy()
            for k, (t, fr) in enumerate(zip(times[:-1], frames)):
                pert = _perturbation_part(coeffs, fr, fields, float(t), nodes, T, cfg)
                new[k] += pert.reshape(space_shape)
        new[-1] = 0.0
        change = float(np.max(np.abs(new - u)))
        u = new
        iterations = it + 1
        monitor.record(change)
        if change < cfg.tol:
            break
    fields = stencil_fields(u, axes, d)
    return GridSolution(coeffs, grid, cfg, times, axes, u, fields, iterations,
                        monitor.changes, monitor.ratios)


def fixed_point_residual(sol: GridSolution, phi: Field) -> float:
    """sup over grid nodes of |u - rhs(u)|."""
    d = sol.coeffs.d
    nodes = sol.spec.nodes().reshape(-1, 2 * d)
    fields = sol.grid_fields()
    worst = 0.0
    for k, t in enumerate(sol.times[:-1]):
        rhs = representation_rhs(sol.coeffs, fields, float(t), nodes, sol.T, sol.config, phi)
        worst = max(worst, float(np.max(np.abs(rhs - sol.u[k].reshape(-1)))))
    return worst


def pde_residual(sol: GridSolution, phi: Field, margin: int = 1) -> np.ndarray:
    """|d_t u + L u + phi| at interior nodes (time by central differences)."""
    d = sol.coeffs.d
    if d != 1:
        raise ValueError("grid residual is implemented for d = 1")
    times = sol.times
    nodes = sol.spec.nodes()
    out = []
    inner = slice(margin, sol.spec.n_space - margin)
    for k in range(1, times.size - 1):
        dt = (sol.u[k + 1] - sol.u[k - 1]) / (times[k + 1] - times[k - 1])
        f = {key: val[k] for key, val in sol.fields.items()}
        psi = SmoothField(d1=lambda t, x, f=f: f["D1u"], d2=lambda t, x, f=f: f["D2u"],
                          d11=lambda t, x, f=f: f["D1sqU"])
        gen = apply_generator(sol.coeffs, psi, times[k], nodes)
        res = dt + gen + phi(times[k], nodes)
        out.append(np.abs(res[inner, inner]))
    return np.array(out)


# --------------------------------------------------------------------------
# Monte Carlo cross-check


def feynman_kac_first_term(coeffs: CoefficientSet, phi: Field, t: float, x, T: float,
                           n_paths: int, seed: int, cfg: PicardConfig | None = None):
    """Monte Carlo estimate of E int_t^T phi(s, X_s) ds for the frozen process from (t, x).

    The time integral uses the same graded rule as the deterministic solver;
    at every node an independent exact Gaussian draw is taken per path.
    Returns ``(estimate, standard_error)``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    cfg = cfg or PicardConfig()
    x = np.asarray(x, dtype=float)
    frame = solve_transport(coeffs, t, x, T, cfg.ode)
    rng = np.random.default_rng(seed)
    s_nodes, s_w = time_rule(t, T, cfg)
    acc = np.zeros(n_paths)
    for s, ws in zip(s_nodes, s_w):
        y = frozen_simulate(frame, x, t, float(s), rng, n_paths)
        acc += ws * np.asarray(phi(float(s), y), dtype=float)
    est = math.fsum(acc) / n_paths
    if n_paths < 2:
        return est, float("nan")
    sd = math.sqrt(math.fsum((acc - est) ** 2) / (n_paths - 1))
    return est, sd / math.sqrt(n_paths)


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticsReport:
    sup_D1u: float
    sup_D2u: float
    sup_D1sqU: float
    sup_D1D2u: float
    holder_modulus: float
    gamma: float
    pairs: int

    def norms(self) -> dict[str, float]:
        return {"D1u": self.sup_D1u, "D2u": self.sup_D2u,
                "D1sqU": self.sup_D1sqU, "D1D2u": self.sup_D1D2u}


def gamma_bound(coeffs: CoefficientSet) -> float:
    h = coeffs.holder
    return 3.0 * min(h.beta12, h.beta22) - 1.0


def derivative_diagnostics(sol: GridSolution, gamma: float, pair_samples: int | None = None,
                           seed: int = 0) -> DiagnosticsReport:
    """Sup-norms of the derivative fields and the Hölder modulus of D2u in x2.

    The modulus compares nodes sharing (t, x1); with ``pair_samples=None``
    every such pair is used, otherwise that many pairs are drawn at random.
    """
    bound = gamma_bound(sol.coeffs)
    if not 0.0 < gamma < bound:
        raise InvalidGamma(f"gamma must lie in (0, {bound:g}), got {gamma:g}")
    if sol.coeffs.d != 1:
        raise ValueError("diagnostics are implemented for d = 1")
    h = sol.coeffs.holder
    f = sol.fields
    d2u = f["D2u"][..., 0]
    x2 = sol.axes[1]

    def denom(r):
        return r ** (gamma / 3.0) + r ** h.beta22 + r ** h.beta12 + r

    if pair_samples is None:
        diff = np.abs(d2u[..., :, None] - d2u[..., None, :])
        r = np.abs(x2[:, None] - x2[None, :])
        mask = r > 0
        quot = diff[..., mask] / denom(r[mask])
        modulus = float(quot.max()) if quot.size else 0.0
        pairs = int(mask.sum()) * d2u.shape[0] * d2u.shape[1]
    else:
        rng = np.random.default_rng(seed)
        nt, n1, n2 = d2u.shape
        k = rng.integers(0, nt, pair_samples)
        i = rng.integers(0, n1, pair_samples)
        j = rng.integers(0, n2, pair_samples)
        jp = (j + rng.integers(1, n2, pair_samples)) % n2
        r = np.abs(x2[j] - x2[jp])
        modulus = float(np.max(np.abs(d2u[k, i, j] - d2u[k, i, jp]) / denom(r)))
        pairs = pair_samples
    return DiagnosticsReport(
        float(np.max(np.abs(f["D1u"]))), float(np.max(np.abs(f["D2u"]))),
        float(np.max(np.abs(f["D1sqU"]))), float(np.max(np.abs(f["D1D2u"]))),
        modulus, gamma, pairs,
    )


def solver_report(sol: GridSolution, diag: DiagnosticsReport | None = None) -> dict:
    return {
        "horizon": sol.T,
        "grid": asdict(sol.spec),
        "config": asdict(sol.config),
        "iterations": sol.iterations,
        "changes": sol.changes,
        "contraction_ratios": sol.ratios,
        "final_residual": sol.final_residual,
        "diagnostics": None if diag is None else {
            "sup_norms": diag.norms(), "M": diag.holder_modulus, "gamma": diag.gamma,
            "pairs": diag.pairs,
        },
    }


def write_report(path, sol: GridSolution, diag: DiagnosticsReport | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(solver_report(sol, diag), fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# canonical problems


def holder_source(beta: float = 0.8) -> Field:
    """phi(s, y) = sign(y2)|y2|^beta exp(-|y|^2 / 4) (d = 1 layout, summed over y2 components)."""

    def phi(s, y):
        y = np.asarray(y, dtype=float)
        d = y.shape[-1] // 2
        y2 = y[..., d:]
        return np.sum(np.sign(y2) * np.abs(y2) ** beta, axis=-1) * np.exp(
            -0.25 * np.sum(y * y, axis=-1))

    return phi


def manufactured_problem(coeffs: CoefficientSet, T: float):
    """Exact solution u*(t, x) = (T - t) exp(-|x|^2) and the matching source.

    The source is phi = -(d_t u* + L u*), with L applied through analytic
    derivatives, so that d_t u* + L u* + phi = 0 and u*(T) = 0.
    """
    d = coeffs.d

    def gauss(x):
        return np.exp(-np.sum(np.asarray(x, dtype=float) ** 2, axis=-1))

    def value(t, x):
        return (T - t) * gauss(x)

    def d1(t, x):
        x1, _ = split(x, d)
        return (-2.0 * x1 * ((T - t) * gauss(x))[..., None])

    def d2(t, x):
        _, x2 = split(x, d)
        return (-2.0 * x2 * ((T - t) * gauss(x))[..., None])

    def d11(t, x):
        x1, _ = split(x, d)
        g = ((T - t) * gauss(x))[..., None, None]
        return (4.0 * x1[..., :, None] * x1[..., None, :] - 2.0 * np.eye(d)) * g

    def dt(t, x):
        return -gauss(x) + 0.0 * np.asarray(t)

    u_star = SmoothField(d1=d1, d2=d2, d11=d11, value=value, dt=dt)

    def phi(s, y):
        return -(dt(s, y) + apply_generator(coeffs, u_star, s, y))

    return phi, u_star
