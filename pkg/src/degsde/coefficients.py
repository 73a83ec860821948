"""Coefficient sets, named presets, mollification and sampled assumption audits.

Coefficient maps follow one calling convention throughout the package::

    F1(t, x1, x2) -> (..., d)        F2(t, x1, x2) -> (..., d)
    sigma(t, x1, x2) -> (..., d, d)  D1F2(t, x1, x2) -> (..., d, d)

where ``x1`` and ``x2`` have shape ``(..., d)`` and ``t`` is a scalar or an
array broadcastable against ``x1[..., 0]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .errors import QuadratureFailure

CoefMap = Callable[..., np.ndarray]

H1_THRESHOLD = 2.0 / 3.0


@dataclass(frozen=True)
class HolderExponents:
    beta11: float = 0.9
    beta12: float = 0.9
    beta22: float = 0.9
    alpha1: float = 0.5


@dataclass(frozen=True)
class HolderConstants:
    C1: float = 1.0
    C2: float = 1.0
    Csigma: float = 1.0
    C2bar: float = 1.0


@dataclass(frozen=True)
class EntryBox:
    """Closed axis-aligned box of d x d matrices plus a declared spectral bound.

    ``low``/``high`` are scalars (applied to every entry) or d x d arrays.
    ``spectral_bound`` is the constant bounding the spectrum of M M^T from
    both sides (``1/bound <= eig <= bound``).
    """

    low: float | np.ndarray
    high: float | np.ndarray
    spectral_bound: float

    def contains(self, m: np.ndarray, atol: float = 0.0) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        lo = np.asarray(self.low, dtype=float)
        hi = np.asarray(self.high, dtype=float)
        inside = (m >= lo - atol) & (m <= hi + atol)
        return np.all(inside, axis=(-2, -1))


@dataclass(frozen=True)
class CoefficientSet:
    d: int
    F1: CoefMap
    F2: CoefMap
    sigma: CoefMap
    D1F2: CoefMap | None = None
    holder: HolderExponents = field(default_factory=HolderExponents)
    constants: HolderConstants = field(default_factory=HolderConstants)
    ellipticity: float = 2.0
    convex_set: EntryBox | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    claims_h1: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension d must be positive")
        if not self.ellipticity > 1:
            raise ValueError("ellipticity constant must exceed 1")
        if self.convex_set is not None and not self.convex_set.spectral_bound > 1:
            raise ValueError("spectral bound of the convex set must exceed 1")

    @property
    def d1f2_is_fd(self) -> bool:
        return self.D1F2 is None

    def d1f2(self, t, x1, x2) -> np.ndarray:
        if self.D1F2 is not None:
            return self.D1F2(t, x1, x2)
        return fd_jacobian_x1(self.F2, t, x1, x2)

    def a(self, t, x1, x2) -> np.ndarray:
        s = self.sigma(t, x1, x2)
        return s @ np.swapaxes(s, -1, -2)

    def drift(self, t, x) -> np.ndarray:
        """Full drift ``F = (F1, F2)`` on states of shape ``(..., 2d)``."""
        x1, x2 = split(x, self.d)
        return np.concatenate([self.F1(t, x1, x2), self.F2(t, x1, x2)], axis=-1)


def split(x, d: int):
    x = np.asarray(x, dtype=float)
    return x[..., :d], x[..., d:]


def fd_jacobian_x1(f: CoefMap, t, x1, x2, scale: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` with respect to ``x1``; shape (..., d, d)."""
    x1 = np.asarray(x1, dtype=float)
    d = x1.shape[-1]
    cols = []
    for k in range(d):
        h = scale * np.maximum(1.0, np.abs(x1[..., k]))
        e = np.zeros_like(x1)
        e[..., k] = h
        cols.append((f(t, x1 + e, x2) - f(t, x1 - e, x2)) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


# --------------------------------------------------------------------------
# presets


def _zeros_vec(t, x1, x2):
    return np.zeros(np.broadcast_shapes(np.shape(x1), np.shape(x2)))


def _identity_field(d: int, scale: float = 1.0):
    def sigma(t, x1, x2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.broadcast_to(scale * np.eye(d), shape + (d, d)).copy()

    return sigma


def _const_matrix_field(m: np.ndarray):
    m = np.asarray(m, dtype=float)

    def field_(t, x1, x2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.broadcast_to(m, shape + m.shape).copy()

    return field_


def _spectral_bound_for(m: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(m @ m.T)
    return 1.01 * max(eig.max(), 1.0 / eig.min(), 1.0 + 1e-6)


def signed_power(x, beta: float):
    return np.sign(x) * np.abs(x) ** beta


def kolmogorov(alpha: float = 1.0, d: int = 1) -> CoefficientSet:
    """F1 = 0, sigma = Id, F2 = alpha * x1."""
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    gamma = alpha * np.eye(d)
    return CoefficientSet(
        d=d,
        F1=_zeros_vec,
        F2=lambda t, x1, x2: alpha * np.asarray(x1, dtype=float) + 0.0 * np.asarray(x2),
        sigma=_identity_field(d),
        D1F2=_const_matrix_field(gamma),
        holder=HolderExponents(0.9, 0.9, 0.9, 0.5),
        constants=HolderConstants(1.0, abs(alpha), 1.0, 1.0),
        ellipticity=1.5,
        convex_set=EntryBox(alpha * np.eye(d), alpha * np.eye(d), _spectral_bound_for(gamma)),
        name="kolmogorov",
        params={"alpha": alpha, "d": d},
    )


def holder(beta: float = 0.8, d: int = 1) -> CoefficientSet:
    """F1 = 0, sigma = Id, F2 = x1 + sign(x2)|x2|^beta (componentwise)."""
    return CoefficientSet(
        d=d,
        F1=_zeros_vec,
        F2=lambda t, x1, x2: np.asarray(x1, dtype=float) + signed_power(x2, beta),
        sigma=_identity_field(d),
        D1F2=_const_matrix_field(np.eye(d)),
        holder=HolderExponents(0.9, 0.9, beta, 0.5),
        constants=HolderConstants(1.0, 2.0 ** (1.0 - beta) * d, 1.0, 1.0),
        ellipticity=1.5,
        convex_set=EntryBox(np.eye(d), np.eye(d), 1.5),
        name="holder",
        params={"beta": beta, "d": d},
    )


def lipschitz(d: int = 1) -> CoefficientSet:
    """F1 = 0, sigma = Id, F2 = x1 + x2."""
    return CoefficientSet(
        d=d,
        F1=_zeros_vec,
        F2=lambda t, x1, x2: np.asarray(x1, dtype=float) + np.asarray(x2, dtype=float),
        sigma=_identity_field(d),
        D1F2=_const_matrix_field(np.eye(d)),
        holder=HolderExponents(0.9, 0.9, 0.99, 0.5),
        constants=HolderConstants(1.0, 2.0 * d, 1.0, 1.0),
        ellipticity=1.5,
        convex_set=EntryBox(np.eye(d), np.eye(d), 1.5),
        name="lipschitz",
        params={"d": d},
    )


def linear_gamma(gamma, beta: float | None = None, fbar2: CoefMap | None = None) -> CoefficientSet:
    """F1 = 0, sigma = Id, F2 = Fbar2(x2) + Gamma x1 with a constant matrix Gamma.

    ``fbar2`` maps ``x2 -> (..., d)``; when omitted it is ``sign(x2)|x2|^beta``
    if ``beta`` is given and zero otherwise.
    """
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    d = g.shape[0]
    if g.shape != (d, d):
        raise ValueError("Gamma must be a square matrix")
    if fbar2 is None:
        if beta is None:
            fbar2 = lambda x2: np.zeros_like(np.asarray(x2, dtype=float))  # noqa: E731
        else:
            fbar2 = lambda x2: signed_power(x2, beta)  # noqa: E731
    b22 = beta if beta is not None else 0.99
    return CoefficientSet(
        d=d,
        F1=_zeros_vec,
        F2=lambda t, x1, x2: np.einsum("ij,...j->...i", g, x1) + fbar2(np.asarray(x2, dtype=float)),
        sigma=_identity_field(d),
        D1F2=_const_matrix_field(g),
        holder=HolderExponents(0.9, 0.9, b22, 0.5),
        constants=HolderConstants(1.0, (np.abs(g).max() + 2.0) * d, 1.0, 1.0),
        ellipticity=1.5,
        convex_set=EntryBox(g, g, _spectral_bound_for(g)),
        name="linear-gamma",
        params={"gamma": g.tolist(), "beta": beta},
    )


def smooth(d: int = 1) -> CoefficientSet:
    """Smooth nonlinear coefficients with state-dependent noise and D1F2.

    F1 = -0.5 x1 + 0.3 sin(x2),  sigma = (1 + 0.2 sin(x1 + x2)) Id,
    F2 = 1.5 x1 + 0.2 sin(x1) + cos(x2)  (so D1F2 = 1.5 + 0.2 cos(x1)).
    """

    def F1(t, x1, x2):
        return -0.5 * np.asarray(x1, dtype=float) + 0.3 * np.sin(x2)

    def F2(t, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        return 1.5 * x1 + 0.2 * np.sin(x1) + np.cos(x2)

    def sigma(t, x1, x2):
        s = 1.0 + 0.2 * np.sin(np.sum(x1, axis=-1) + np.sum(x2, axis=-1))
        return s[..., None, None] * np.eye(d)

    def D1F2(t, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        diag = 1.5 + 0.2 * np.cos(x1) + 0.0 * np.asarray(x2)
        return diag[..., :, None] * np.eye(d)

    return CoefficientSet(
        d=d,
        F1=F1,
        F2=F2,
        sigma=sigma,
        D1F2=D1F2,
        holder=HolderExponents(0.9, 0.9, 0.9, 0.5),
        constants=HolderConstants(1.0, 2.7, 0.3, 0.2),
        ellipticity=1.5,
        convex_set=EntryBox(1.3 * np.eye(d), 1.7 * np.eye(d), 3.0),
        name="smooth",
        params={"d": d},
    )


PRESETS = {
    "kolmogorov": kolmogorov,
    "holder": holder,
    "linear-gamma": linear_gamma,
    "lipschitz": lipschitz,
    "smooth": smooth,
}


# --------------------------------------------------------------------------
# mollification


def bump(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def time_normalization() -> float:
    """``c2`` with ``c2 * int bump(|s|) ds = 1``."""
    val, _ = quad(lambda z: math.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=0.0, epsrel=1e-12)
    return 1.0 / val


@lru_cache(maxsize=None)
def space_normalization(dim: int) -> float:
    """``c1`` with ``c1 * int_{R^dim} bump(|y|) dy = 1`` (radial integral)."""
    sphere = 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)
    val, _ = quad(
        lambda r: r ** (dim - 1) * math.exp(-1.0 / (1.0 - r * r)),
        0.0,
        1.0,
        epsabs=1e-15,
        epsrel=1e-14,
    )
    return 1.0 / (sphere * val)


@dataclass(frozen=True)
class MollifierConfig:
    n: int
    nodes: int = 21
    horizon: float | None = None
    norm_tol: float = 1e-3

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("mollification index n must be >= 1")
        if self.nodes < 1:
            raise ValueError("need at least one quadrature node per axis")

    @property
    def radius(self) -> float:
        return 1.0 / self.n

    def c1(self, d: int) -> float:
        return space_normalization(2 * d)

    @property
    def c2(self) -> float:
        return time_normalization()

    def rule(self, d: int):
        """Midpoint tensor rule over the kernel support.

        Returns ``(s_nodes, y_nodes, weights)`` with ``s_nodes`` (Q,),
        ``y_nodes`` (Q, 2d) and renormalized ``weights`` (Q,). Raises
        :class:`QuadratureFailure` if the raw rule misses unit mass by more than
        ``norm_tol``.
        """
        return _mollifier_rule(self.n, self.nodes, d, self.norm_tol)


@lru_cache(maxsize=32)
def _mollifier_rule(n: int, nodes: int, d: int, norm_tol: float):
    h = 2.0 / nodes
    u = -1.0 + h * (np.arange(nodes) + 0.5)
    wt = time_normalization() * bump(u) * h
    grids = np.meshgrid(*([u] * (2 * d)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    ws = space_normalization(2 * d) * bump(np.linalg.norm(pts, axis=-1)) * h ** (2 * d)
    keep = ws > 0
    pts, ws = pts[keep], ws[keep]
    mass_t, mass_s = wt.sum(), ws.sum()
    for label, mass in (("time", mass_t), ("space", mass_s)):
        if abs(mass - 1.0) > norm_tol:
            raise QuadratureFailure(
                f"{label} mollifier rule has mass {mass:.9f}; deviation exceeds {norm_tol:g}"
            )
    keep_t = wt > 0
    wt = wt[keep_t] / mass_t
    ut = u[keep_t]
    ws = ws / mass_s
    s_nodes = np.repeat(ut, ws.size) / n
    y_nodes = np.tile(pts, (ut.size, 1)) / n
    weights = np.repeat(wt, ws.size) * np.tile(ws, ut.size)
    return s_nodes, y_nodes, weights


def convolve(f: CoefMap, d: int, config: MollifierConfig) -> CoefMap:
    """Space-time convolution of a coefficient map with the mollifier of ``config``."""
    s_nodes, y_nodes, weights = config.rule(d)
    q = weights.size
    horizon = config.horizon

    def mollified(t, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        lead = np.broadcast_shapes(x1.shape[:-1], x2.shape[:-1], np.shape(t))
        x1f = np.broadcast_to(x1, lead + (d,)).reshape(-1, d)
        x2f = np.broadcast_to(x2, lead + (d,)).reshape(-1, d)
        tf = np.broadcast_to(np.asarray(t, dtype=float), lead).reshape(-1)
        npts = tf.size
        chunk = max(1, 2_000_000 // q)
        parts = []
        for lo in range(0, npts, chunk):
            hi = min(npts, lo + chunk)
            tt = tf[lo:hi, None] - s_nodes[None, :]
            if horizon is not None:
                tt = np.clip(tt, 0.0, horizon)
            a1 = x1f[lo:hi, None, :] - y_nodes[None, :, :d]
            a2 = x2f[lo:hi, None, :] - y_nodes[None, :, d:]
            vals = np.asarray(f(tt, a1, a2), dtype=float)
            parts.append(np.tensordot(weights, np.moveaxis(vals, 1, 0), axes=1))
        out = np.concatenate(parts, axis=0) if parts else np.zeros((0,))
        return out.reshape(lead + out.shape[1:])

    return mollified


def mollify(coeffs: CoefficientSet, config: MollifierConfig) -> CoefficientSet:
    """Mollified coefficient set.

    ``F1``, ``F2``, the diffusion matrix ``a`` and ``D1F2`` are convolved;
    the returned ``sigma`` is the Cholesky root of the mollified ``a``.
    Metadata is copied unchanged.
    """
    d = coeffs.d
    a_n = convolve(coeffs.a, d, config)

    def sigma_n(t, x1, x2):
        return np.linalg.cholesky(a_n(t, x1, x2))

    return replace(
        coeffs,
        F1=convolve(coeffs.F1, d, config),
        F2=convolve(coeffs.F2, d, config),
        sigma=sigma_n,
        D1F2=convolve(coeffs.d1f2, d, config),
        name=f"{coeffs.name}*mollified(n={config.n})",
        params={**coeffs.params, "mollifier_n": config.n},
    )


# --------------------------------------------------------------------------
# assumption audit


@dataclass(frozen=True)
class SampleSpec:
    low: float | np.ndarray = -2.0
    high: float | np.ndarray = 2.0
    count: int = 2000
    seed: int = 0
    t_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("sample count must be at least 2")


@dataclass
class Violation:
    assumption: str
    message: str
    witness: tuple = ()


@dataclass
class AssumptionReport:
    passed: dict[str, bool]
    holder_quotients: dict[str, float]
    ellipticity_interval: tuple[float, float]
    d1f2_spectral_interval: tuple[float, float]
    d1f2_box_violations: int
    d1f2_finite_difference: bool
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def _pair_samples(spec: SampleSpec, dim: int, rng: np.random.Generator):
    low = np.broadcast_to(np.asarray(spec.low, dtype=float), (dim,))
    high = np.broadcast_to(np.asarray(spec.high, dtype=float), (dim,))
    x = low + (high - low) * rng.random((spec.count, dim))
    direction = rng.standard_normal((spec.count, dim))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    span = float(np.max(high - low))
    radius = span * 10.0 ** rng.uniform(-4.0, 0.0, size=(spec.count, 1))
    y = x + radius * direction
    t = rng.uniform(spec.t_range[0], spec.t_range[1], size=spec.count)
    return t, x, y


def check_assumptions(coeffs: CoefficientSet, spec: SampleSpec) -> AssumptionReport:
    """Sampled audit of the Hölder (H1), ellipticity (H2) and D1F2 (H3) hypotheses."""
    d = coeffs.d
    rng = np.random.default_rng(spec.seed)
    t, x, y = _pair_samples(spec, 2 * d, rng)
    x1, x2 = split(x, d)
    y1, y2 = split(y, d)
    h, c = coeffs.holder, coeffs.constants
    violations: list[Violation] = []
    passed: dict[str, bool] = {}
    rtol = 1e-9

    def norm(v):
        return np.linalg.norm(v, axis=-1)

    dx1, dx2 = norm(x1 - y1), norm(x2 - y2)

    exps_ok = True
    if coeffs.claims_h1:
        for label, beta in (("beta_1^2", h.beta12), ("beta_2^2", h.beta22)):
            if not beta > H1_THRESHOLD:
                exps_ok = False
                violations.append(
                    Violation("H1", f"(H1) exponent not greater than 2/3: {label} = {beta:g}")
                )
    for label, val in (("beta_1^1", h.beta11), ("beta_1^2", h.beta12),
                       ("beta_2^2", h.beta22), ("alpha^1", h.alpha1)):
        if not 0.0 < val < 1.0:
            exps_ok = False
            violations.append(Violation("H1", f"(H1) exponent {label} = {val:g} outside (0, 1)"))

    quotients = {}
    checks = (
        ("F1", norm(coeffs.F1(t, x1, x2) - coeffs.F1(t, y1, y2)),
         dx1 ** h.beta11 + dx2 ** h.beta12, c.C1),
        ("F2", norm(coeffs.F2(t, x1, x2) - coeffs.F2(t, y1, y2)),
         dx1 + dx2 ** h.beta22, c.C2),
        ("sigma", np.linalg.norm(coeffs.sigma(t, x1, x2) - coeffs.sigma(t, y1, y2), axis=(-2, -1)),
         dx1 + dx2, c.Csigma),
    )
    holder_ok = True
    for label, num, den, bound in checks:
        q = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        k = int(np.argmax(q))
        quotients[label] = float(q[k])
        if q[k] > bound * (1 + rtol):
            holder_ok = False
            violations.append(Violation(
                "H1", f"(H1) Hölder quotient of {label} is {q[k]:.6g} > declared {bound:g}",
                (float(t[k]), x[k].tolist(), y[k].tolist()),
            ))
    passed["H1"] = exps_ok and holder_ok

    # (H2) Rayleigh quotients of a = sigma sigma^T at sampled points
    eig_a = np.linalg.eigvalsh(coeffs.a(t, x1, x2))
    lo_a, hi_a = float(eig_a.min()), float(eig_a.max())
    lam = coeffs.ellipticity
    passed["H2"] = lo_a >= (1.0 / lam) * (1 - rtol) and hi_a <= lam * (1 + rtol)
    if not passed["H2"]:
        k = int(np.argmin(np.minimum(eig_a.min(axis=-1) * lam, lam / eig_a.max(axis=-1))))
        violations.append(Violation(
            "H2", f"(H2) ellipticity interval [{lo_a:.6g}, {hi_a:.6g}] not within "
                  f"[{1 / lam:.6g}, {lam:.6g}]", (float(t[k]), x[k].tolist()),
        ))

    # (H3-a) Hölder continuity of D1F2 in x1, (H3-b) containment in the convex set
    j_x = coeffs.d1f2(t, x1, x2)
    j_y = coeffs.d1f2(t, y1, x2)
    num = np.linalg.norm(j_x - j_y, axis=(-2, -1))
    den = dx1 ** h.alpha1
    q = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    quotients["D1F2"] = float(q.max())
    passed["H3-a"] = q.max() <= c.C2bar * (1 + rtol) + (1e-6 if coeffs.d1f2_is_fd else 0.0)
    if not passed["H3-a"]:
        k = int(np.argmax(q))
        violations.append(Violation(
            "H3-a", f"(H3-a) Hölder quotient of D1F2 is {q[k]:.6g} > declared {c.C2bar:g}",
            (float(t[k]), x[k].tolist(), y[k].tolist()),
        ))
    eig_j = np.linalg.eigvalsh(j_x @ np.swapaxes(j_x, -1, -2))
    lo_j, hi_j = float(eig_j.min()), float(eig_j.max())
    box_violations = 0
    h3b = True
    if coeffs.convex_set is not None:
        atol = 1e-7 if coeffs.d1f2_is_fd else 1e-12
        inside = coeffs.convex_set.contains(j_x, atol=atol)
        box_violations = int(np.count_nonzero(~inside))
        lam_bar = coeffs.convex_set.spectral_bound
        spec_ok = lo_j >= (1.0 / lam_bar) * (1 - rtol) and hi_j <= lam_bar * (1 + rtol)
        h3b = box_violations == 0 and spec_ok
        if box_violations:
            k = int(np.argmin(inside))
            violations.append(Violation(
                "H3-b", f"(H3-b) D1F2 left the convex set at {box_violations} sampled points",
                (float(t[k]), x[k].tolist()),
            ))
        if not spec_ok:
            violations.append(Violation(
                "H3-b", f"(H3-b) spectrum of D1F2 D1F2^T [{lo_j:.6g}, {hi_j:.6g}] outside "
                        f"[{1 / lam_bar:.6g}, {lam_bar:.6g}]",
            ))
    passed["H3-b"] = h3b

    return AssumptionReport(
        passed=passed,
        holder_quotients=quotients,
        ellipticity_interval=(lo_a, hi_a),
        d1f2_spectral_interval=(lo_j, hi_j),
        d1f2_box_violations=box_violations,
        d1f2_finite_difference=coeffs.d1f2_is_fd,
        violations=violations,
    )
