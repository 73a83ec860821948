import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degsde.coefficients import holder, linear_gamma, smooth
from degsde.errors import (InadmissibleVariant, InvalidGamma, MissingDerivativeField,
                           NoContraction, QuadratureBudgetExceeded)
from degsde.kernel import DerivOrder, SmoothField
from degsde.parametrix import (ContractionMonitor, GridFields, GridSpec, PicardConfig,
                               ZeroFields, centered_derivative_integral, centering_check,
                               delta_apply, derivative_diagnostics, derivative_integral,
                               feynman_kac_first_term, fixed_point_residual, integrand_terms,
                               manufactured_problem, picard_solve, representation_rhs,
                               solver_report, space_rule, stencil_fields, time_rule,
                               write_report)
from degsde.transport import solve_transport

ONE = lambda s, y: np.ones(np.shape(y)[:-1])  # noqa: E731
ZERO = lambda s, y: np.zeros(np.shape(y)[:-1])  # noqa: E731
Y1 = lambda s, y: np.asarray(y)[..., 0]  # noqa: E731
Y2 = lambda s, y: np.asarray(y)[..., 1]  # noqa: E731


def sample_field():
    """A smooth non-polynomial field with analytic derivatives (d = 1)."""
    return SmoothField(
        d1=lambda t, y: (np.cos(y[..., 0]) * np.cos(0.7 * y[..., 1]) + 0.3 * y[..., 1])[..., None],
        d2=lambda t, y: (-0.7 * np.sin(y[..., 0]) * np.sin(0.7 * y[..., 1])
                         + 0.3 * y[..., 0])[..., None],
        d11=lambda t, y: (-np.sin(y[..., 0]) * np.cos(0.7 * y[..., 1]))[..., None, None],
    )


# --------------------------------------------------------------------------
# perturbation operators

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_delta_decomposition(vals):
    y, zeta = np.array(vals[:2]), np.array(vals[2:])
    f = lambda s, p: np.sin(p[..., 0]) * np.exp(0.3 * p[..., 1]) + p[..., 1] ** 3  # noqa: E731
    full = delta_apply("full", zeta, f, 0.0, y)
    parts = delta_apply("1", zeta, f, 0.0, y) + delta_apply("2", zeta, f, 0.0, y)
    assert abs(full - parts) <= 1e-12 * max(1.0, abs(full))


def test_delta_examples():
    zeta = np.array([0.3, -0.8])
    f = lambda s, p: p[..., 0] * p[..., 1]  # noqa: E731
    assert delta_apply("full", zeta, f, 0.0, zeta) == 0.0
    y = np.array([1.2, 2.5])
    assert delta_apply("2", zeta, Y2, 0.0, y) == pytest.approx(2.5 + 0.8)
    assert delta_apply("1", zeta, Y2, 0.0, y) == 0.0
    with pytest.raises(ValueError):
        delta_apply("3", zeta, f, 0.0, y)


# --------------------------------------------------------------------------
# quadrature rules

def test_time_rule_graded_and_exact_for_cubics():
    cfg = PicardConfig()
    s, w = time_rule(0.2, 1.0, cfg)
    assert s.size == 48 and np.all((s > 0.2) & (s < 1.0))
    assert w.sum() == pytest.approx(0.8, rel=1e-7)
    assert np.sum(w * (s - 0.2) ** 3) == pytest.approx(0.8 ** 4 / 4, rel=1e-12)
    assert np.min(s) - 0.2 < 1e-7
    assert time_rule(1.0, 1.0, cfg)[0].size == 0


@pytest.mark.parametrize("rule", ["hermite", "legendre"])
def test_space_rule_normal_moments(rule):
    cfg = PicardConfig(space_rule=rule, space_nodes=8 if rule == "hermite" else 64)
    z, w = space_rule(cfg, 2)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.sum(w * z[:, 0] ** 2) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(w * z[:, 0] ** 2 * z[:, 1] ** 2) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(w * z[:, 1] ** 4) == pytest.approx(3.0, abs=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        PicardConfig(tol=0.0)
    with pytest.raises(ValueError):
        PicardConfig(panel_ratio=1.0)
    with pytest.raises(ValueError):
        PicardConfig(space_rule="simpson")
    with pytest.raises(ValueError):
        GridSpec(0.0)


# --------------------------------------------------------------------------
# grid derivative fields

def test_stencils_exact_on_quadratics():
    spec = GridSpec(1.0, n_time=3, n_space=9)
    nodes = spec.nodes()
    x1, x2 = nodes[..., 0], nodes[..., 1]
    u = np.stack([(1 + t) * (x1 ** 2 - 3 * x1 * x2 + 0.5 * x2 ** 2 + x1) for t in spec.times])
    f = stencil_fields(u, spec.axes, 1)
    t = (1 + spec.times)[:, None, None]
    assert np.allclose(f["D1u"][..., 0], t * (2 * x1 - 3 * x2 + 1), atol=1e-12)
    assert np.allclose(f["D2u"][..., 0], t * (-3 * x1 + x2), atol=1e-12)
    assert np.allclose(f["D1sqU"][..., 0, 0], 2 * t, atol=1e-10)
    assert np.allclose(f["D1D2u"][..., 0, 0], -3 * t, atol=1e-10)


def test_grid_fields_interpolation_and_clamping():
    spec = GridSpec(1.0, n_time=3, n_space=5, half_width=2.0)
    nodes = spec.nodes()
    u = np.stack([t + nodes[..., 0] + 2 * nodes[..., 1] for t in spec.times])
    g = GridFields(spec.times, spec.axes, 1, u)
    y = np.array([[0.3, -1.1], [1.7, 0.2]])
    assert np.allclose(g.value(0.25, y), 0.25 + y[:, 0] + 2 * y[:, 1])
    assert np.allclose(g.d2(0.6, y)[:, 0], 2.0)
    far = np.array([[5.0, -7.0]])
    assert np.allclose(g.value(0.5, far), 0.5 + 2.0 - 4.0)
    assert g.d12(0.5, y).shape == (2, 1, 1)


# --------------------------------------------------------------------------
# integrands

def test_exact_linearization_has_no_perturbation():
    c = linear_gamma([[1.4]])
    fr = solve_transport(c, 0.0, np.array([0.3, -0.5]), 1.0)
    y = np.random.default_rng(0).standard_normal((40, 2)) * 2
    for centered in (False, True):
        terms = integrand_terms(c, fr, sample_field(), 0.6, y, centered=centered, phi=Y1)
        for h in (terms.h2, terms.h3, terms.h4):
            assert np.max(np.abs(h)) < 1e-13
        if centered:
            assert np.max(np.abs(terms.h2_flux)) < 1e-13


def test_centered_terms_vanish_on_transport_level():
    c = smooth()
    fr = solve_transport(c, 0.0, np.array([0.3, -0.2]), 1.0)
    s = 0.4
    th = fr.theta(s)
    y1 = np.linspace(-2, 2, 9)
    y = np.stack([y1, np.full_like(y1, th[1])], axis=-1)
    phi = lambda s_, p: np.sin(p[..., 0] + 2 * p[..., 1])  # noqa: E731
    terms = integrand_terms(c, fr, sample_field(), s, y, centered=True, phi=phi)
    for h in (terms.h1, terms.h2, terms.h3, terms.h4):
        assert np.max(np.abs(h)) < 1e-12
    assert np.max(np.abs(terms.h2_flux)) < 1e-12


def test_missing_derivative_field():
    class Partial:
        def d1(self, s, y):
            return np.zeros(np.shape(y)[:-1] + (1,))
    fr = solve_transport(smooth(), 0.0, np.zeros(2), 1.0)
    with pytest.raises(MissingDerivativeField):
        integrand_terms(smooth(), fr, Partial(), 0.5, np.zeros((1, 2)))


def test_centered_source_matches_plain_for_linear_phi():
    fr = solve_transport(smooth(), 0.0, np.array([0.3, -0.2]), 1.0)
    t, s, x = 0.1, 0.6, np.array([0.25, -0.1])
    plain = derivative_integral(fr, t, x, s, Y2, DerivOrder(n_x2=1))
    centered_phi = lambda s_, y: delta_apply("2", fr.theta(s_), Y2, s_, y)  # noqa: E731
    centered = derivative_integral(fr, t, x, s, centered_phi, DerivOrder(n_x2=1))
    assert abs(plain - centered) < 1e-3


def test_centered_integral_matches_differences_of_plain_integral():
    # D_x2 (and D_x1 D_x2) of the plain spatial integral, with the frame held
    # fixed, computed by finite differences in x against the centered form.
    c = smooth()
    fr = solve_transport(c, 0.0, np.array([0.3, -0.2]), 1.0)
    u = sample_field()
    phi = lambda s_, y: np.tanh(y[..., 1]) + 0.5 * np.sin(y[..., 0])  # noqa: E731
    t, s, x = 0.1, 0.6, np.array([0.25, -0.1])
    z, w = space_rule(PicardConfig(), 2, 48)

    def plain(xx):
        m = fr.mean(t, s, xx)
        y = m + z @ fr.cholesky(t, s).T
        return integrand_terms(c, fr, u, s, y, centered=False, phi=phi).total() @ w

    h = 1e-4
    e1, e2 = np.array([h, 0.0]), np.array([0.0, h])
    fd_x2 = (plain(x + e2) - plain(x - e2)) / (2 * h)
    fd_x1x2 = (plain(x + e1 + e2) - plain(x + e1 - e2) - plain(x - e1 + e2)
               + plain(x - e1 - e2)) / (4 * h * h)
    cen0 = centered_derivative_integral(c, fr, u, t, x, s, n_x1=0, phi=phi)
    cen1 = centered_derivative_integral(c, fr, u, t, x, s, n_x1=1, phi=phi)
    assert abs(float(np.ravel(cen0)[0]) - fd_x2) < 1e-6 * max(1.0, abs(fd_x2))
    assert abs(float(np.ravel(cen1)[0]) - fd_x1x2) < 1e-5 * max(1.0, abs(fd_x1x2))


# --------------------------------------------------------------------------
# centering identities

def centering_frame():
    return solve_transport(smooth(), 0.0, np.array([0.3, -0.2]), 1.0)


def test_centering_constant_f_variant_a():
    res, lhs, rhs = centering_check(centering_frame(), ONE, None, DerivOrder(n_x2=1), "a",
                                    0.0, np.array([0.3, -0.2]), 0.5, return_sides=True)
    assert abs(lhs) < 1e-10 and np.all(rhs == 0.0) and res < 1e-10


@pytest.mark.parametrize("variant,order,g", [
    ("a", DerivOrder(n_x1=1), None),
    ("a", DerivOrder(n_x1=2), None),
    ("a", DerivOrder(n_x1=1, n_x2=1), None),
    ("b", DerivOrder(n_x2=1), None),
    ("b", DerivOrder(n_x1=1, n_x2=1), None),
    ("c", DerivOrder(n_x2=1), "const"),
    ("c", DerivOrder(n_x2=1), "mix"),
    ("c", DerivOrder(n_x1=1, n_x2=1), "mix"),
])
def test_centering_identities(variant, order, g):
    f = lambda s, y: np.sin(y[..., 0]) + y[..., 0] * y[..., 1] + 0.5 * y[..., 1] ** 2  # noqa: E731
    if variant == "b" and order.n_x1 == 0:
        f = lambda s, y: y[..., 1] ** 2  # noqa: E731
    gf = {None: None, "const": lambda s, y: 2.0 + 0.0 * y[..., 0],
          "mix": lambda s, y: np.cos(y[..., 1]) + y[..., 0] * y[..., 1]}[g]
    res = centering_check(centering_frame(), f, gf, order, variant, 0.0,
                          np.array([0.3, -0.2]), 0.5)
    assert res < 1e-3


@pytest.mark.parametrize("c", [-3.0, 0.5, 10.0])
def test_centering_slot_constant_is_invisible(c):
    fr = centering_frame()
    x = np.array([0.3, -0.2])
    f = lambda s, y: np.sin(y[..., 0]) * y[..., 1]  # noqa: E731
    shifted = lambda s, y: f(s, y) + c  # noqa: E731
    order = DerivOrder(n_x1=1, n_x2=1)
    a = derivative_integral(fr, 0.0, x, 0.5, f, order)
    b = derivative_integral(fr, 0.0, x, 0.5, shifted, order)
    assert np.max(np.abs(a - b)) < 1e-3


def test_centering_preconditions():
    fr = centering_frame()
    x = np.array([0.3, -0.2])
    with pytest.raises(InadmissibleVariant):
        centering_check(fr, ONE, None, DerivOrder(), "a", 0.0, x, 0.5)
    with pytest.raises(InadmissibleVariant):
        centering_check(fr, ONE, None, DerivOrder(n_x1=1), "b", 0.0, x, 0.5)
    with pytest.raises(InadmissibleVariant):
        centering_check(fr, ONE, None, DerivOrder(n_x2=1), "c", 0.0, x, 0.5)
    with pytest.raises(InadmissibleVariant):
        centering_check(fr, ONE, None, DerivOrder(n_x2=1, n_y1=1), "b", 0.0, x, 0.5)
    with pytest.raises(InadmissibleVariant):
        centering_check(fr, ONE, None, DerivOrder(n_x2=1), "d", 0.0, x, 0.5)


# --------------------------------------------------------------------------
# representation

def test_representation_simple_sources():
    c = linear_gamma([[1.0]])
    x = np.array([[0.4, -0.3], [1.5, 0.2]])
    zero = ZeroFields(1)
    assert np.all(representation_rhs(c, zero, 0.2, x, 1.0, phi=ZERO) == 0.0)
    assert np.allclose(representation_rhs(c, zero, 0.2, x, 1.0, phi=ONE), 0.8, atol=1e-4)
    assert np.allclose(representation_rhs(c, zero, 0.2, x, 1.0, phi=Y1), 0.8 * x[:, 0], atol=1e-4)
    assert np.all(representation_rhs(c, zero, 1.0, x, 1.0, phi=ONE) == 0.0)


def test_representation_budget():
    with pytest.raises(QuadratureBudgetExceeded):
        representation_rhs(holder(), ZeroFields(1), 0.0, np.zeros((100, 2)), 1.0,
                           PicardConfig(max_points=1000), phi=ONE)


def test_feynman_kac_examples():
    c = linear_gamma([[1.0]])
    x = np.array([0.7, -0.2])
    est, se = feynman_kac_first_term(c, ONE, 0.1, x, 0.6, 1000, 0)
    assert est == pytest.approx(0.5, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)
    est, se = feynman_kac_first_term(c, Y1, 0.0, x, 0.5, 10_000, 1)
    assert abs(est - 0.5 * x[0]) < 3 * se
    with pytest.raises(ValueError):
        feynman_kac_first_term(c, ONE, 0.0, x, 0.5, 0, 1)


def test_feynman_kac_agrees_with_quadrature_on_holder_preset():
    c = holder(0.8)
    phi = lambda s, y: np.sign(y[..., 1]) * np.abs(y[..., 1]) ** 0.8 + np.cos(y[..., 0])  # noqa: E731
    x = np.array([0.3, 0.1])
    quad = float(representation_rhs(c, ZeroFields(1), 0.0, x, 0.5, phi=phi))
    est, se = feynman_kac_first_term(c, phi, 0.0, x, 0.5, 20_000, 3)
    assert abs(quad - est) < max(1e-3, 3 * se)


def test_freezing_point_consistency_with_exact_fields():
    c = holder(0.8)
    T = 0.25
    phi, u_star = manufactured_problem(c, T)
    tol = PicardConfig().tol
    x = np.array([[0.2, -0.4], [0.5, 0.3], [-1.0, 0.6]])
    for t in (0.0, 0.1):
        a = representation_rhs(c, u_star, t, x, T, phi=phi)
        b = representation_rhs(c, u_star, t, x, T, phi=phi, xi=x + 0.1)
        assert np.max(np.abs(a - b)) < 5 * tol
        assert np.max(np.abs(a - u_star.value(t, x))) < 5 * tol


# --------------------------------------------------------------------------
# Picard iteration

@pytest.fixture(scope="module")
def small_manufactured():
    c = holder(0.8)
    T = 0.25
    phi, u_star = manufactured_problem(c, T)
    sol = picard_solve(c, phi, T, PicardConfig(), GridSpec(T, n_time=6, n_space=17))
    return c, phi, u_star, sol


def test_zero_source_gives_zero_after_one_iteration():
    sol = picard_solve(holder(0.8), ZERO, 0.1, grid=GridSpec(0.1, n_time=3, n_space=5))
    assert sol.iterations == 1
    assert np.all(sol.u == 0.0)


def test_small_manufactured_solve(small_manufactured):
    c, phi, u_star, sol = small_manufactured
    nodes = sol.spec.nodes()
    exact = np.stack([u_star.value(t, nodes) for t in sol.times])
    assert np.all(sol.u[-1] == 0.0)
    assert np.max(np.abs(sol.u - exact)) / np.max(np.abs(exact)) < 0.02
    assert all(r < 0.5 for r in sol.ratios)


def test_fixed_point_residual(small_manufactured):
    c, phi, u_star, sol = small_manufactured
    assert fixed_point_residual(sol, phi) <= 2 * sol.config.tol


def test_freezing_point_consistency_with_grid_solution(small_manufactured):
    # with stencil fields the identity holds only up to the grid discretization
    c, phi, u_star, sol = small_manufactured
    fields = sol.grid_fields()
    x = np.array([[0.2, -0.4], [0.5, 0.3]])
    a = representation_rhs(c, fields, 0.05, x, sol.T, phi=phi)
    b = representation_rhs(c, fields, 0.05, x, sol.T, phi=phi, xi=x + 0.1)
    assert np.max(np.abs(a - b)) < 1e-3


def test_report_and_csv(small_manufactured, tmp_path):
    c, phi, u_star, sol = small_manufactured
    diag = derivative_diagnostics(sol, 0.3)
    write_report(tmp_path / "r.json", sol, diag)
    doc = json.loads((tmp_path / "r.json").read_text())
    for key in ("horizon", "grid", "iterations", "contraction_ratios", "final_residual",
                "diagnostics"):
        assert key in doc
    assert set(doc["diagnostics"]["sup_norms"]) == {"D1u", "D2u", "D1sqU", "D1D2u"}
    sol.write_csv(tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,u,D1u,D2u,D1sqU,D1D2u"
    assert len(lines) == 1 + 6 * 17 * 17
    assert solver_report(sol)["diagnostics"] is None


def test_contraction_monitor():
    m = ContractionMonitor(1.0)
    for change in (1.0, 0.5, 0.25):
        m.record(change)
    assert m.ratios == [0.5, 0.5]
    m = ContractionMonitor(2.0)
    m.record(1.0)
    m.record(2.0)
    m.record(4.0)
    with pytest.raises(NoContraction) as info:
        m.record(8.0)
    assert info.value.ratios == [2.0, 2.0, 2.0]
    m = ContractionMonitor(2.0)
    for change in (1.0, 2.0, 4.0, 1.0, 2.0, 4.0):
        m.record(change)  # increases interrupted by a decrease do not trigger


# --------------------------------------------------------------------------
# diagnostics

def _synthetic_solution(u_fn, T=0.5):
    c = holder(0.8)
    spec = GridSpec(T, n_time=3, n_space=9)
    nodes = spec.nodes()
    u = np.stack([u_fn(t, nodes) for t in spec.times])
    from degsde.parametrix import GridSolution
    return GridSolution(c, spec, PicardConfig(), spec.times, spec.axes, u,
                        stencil_fields(u, spec.axes, 1), 1, [0.0], [])


def test_diagnostics_zero_and_linear_fields():
    zero = derivative_diagnostics(_synthetic_solution(lambda t, x: 0.0 * x[..., 0]), 0.3)
    assert all(v == 0.0 for v in zero.norms().values()) and zero.holder_modulus == 0.0
    lin = derivative_diagnostics(_synthetic_solution(lambda t, x: x[..., 1]), 0.3)
    assert lin.sup_D2u == pytest.approx(1.0)
    assert lin.sup_D1u == lin.sup_D1sqU == lin.sup_D1D2u == 0.0
    assert lin.holder_modulus == pytest.approx(0.0, abs=1e-12)


def test_diagnostics_sampled_pairs_and_gamma_range():
    sol = _synthetic_solution(lambda t, x: np.sin(x[..., 1]) * x[..., 1])
    full = derivative_diagnostics(sol, 0.3)
    sampled = derivative_diagnostics(sol, 0.3, pair_samples=500, seed=1)
    assert 0.0 < sampled.holder_modulus <= full.holder_modulus + 1e-15
    assert sampled.pairs == 500
    with pytest.raises(InvalidGamma):
        derivative_diagnostics(sol, 1.5)
    with pytest.raises(InvalidGamma):
        derivative_diagnostics(sol, 0.0)
