import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degsde.coefficients import CoefficientSet, holder, kolmogorov, lipschitz, smooth
from degsde.errors import EmptyEnsemble
from degsde.kernel import kolmogorov_density
from degsde.sde_sim import (BinSpec, BrownianPath, chunk_streams, dual_refinement_experiment,
                            ensemble_stats, euler_simulate, euler_step, euler_terminal,
                            frozen_simulate, histogram_l1, integrate_bins, sup_sq_distance)
from degsde.transport import kolmogorov_covariance, solve_transport


def constant_drift(c1, c2, noise=0.0):
    return CoefficientSet(
        d=1, F1=lambda t, x1, x2: c1 + 0.0 * x1, F2=lambda t, x1, x2: c2 + 0.0 * x2,
        sigma=lambda t, x1, x2: np.full(np.shape(x1)[:-1] + (1, 1), noise))


def test_chunk_streams_cover_paths():
    items = chunk_streams(1, 10, chunk=4)
    assert [(lo, hi) for lo, hi, _ in items] == [(0, 4), (4, 8), (8, 10)]
    a = chunk_streams(1, 10, chunk=4)[1][2].standard_normal(3)
    b = chunk_streams(1, 10, chunk=4)[1][2].standard_normal(3)
    assert np.array_equal(a, b)


def test_deterministic_euler_on_constant_field():
    c = constant_drift(0.5, -1.25)
    path = BrownianPath.sample(np.random.default_rng(0), 0.01, 100, 1)
    traj = euler_simulate(c, np.array([1.0, 2.0]), 0.0, 1.0, path)
    assert np.array_equal(traj.states[0], [1.0, 2.0])
    assert np.allclose(traj.terminal, [1.5, 0.75], atol=1e-12)
    assert traj.times.size == traj.states.shape[0] == 101


def test_euler_rejects_mismatched_path():
    path = BrownianPath.sample(np.random.default_rng(0), 0.01, 50, 1)
    with pytest.raises(ValueError):
        euler_simulate(kolmogorov(), np.zeros(2), 0.0, 1.0, path)


def test_second_block_gets_no_noise():
    c = smooth()
    rng = np.random.default_rng(2)
    state = rng.standard_normal((50, 2))
    dw = rng.standard_normal((50, 1))
    new = euler_step(c, 0.3, state, 0.01, dw)
    drift_only = state[:, 1:] + c.F2(0.3, state[:, :1], state[:, 1:]) * 0.01
    assert np.array_equal(new[:, 1:], drift_only)


def test_second_component_has_zero_quadratic_variation():
    c = holder(0.8)
    hs, peaks = [], []
    for n in (64, 256, 1024, 4096):
        path = BrownianPath.sample(np.random.default_rng(4), 1.0 / n, n, 1, (200,))
        traj = euler_simulate(c, np.zeros((200, 2)), 0.0, 1.0, path)
        inc = np.abs(np.diff(traj.states[..., 1], axis=0))
        hs.append(1.0 / n)
        peaks.append(np.max(inc) / math.sqrt(1.0 / n))
    slope = np.polyfit(np.log(hs), np.log(peaks), 1)[0]
    assert abs(slope - 0.5) < 0.1


def test_coarsening_is_bit_exact():
    rng = np.random.default_rng(3)
    fine = BrownianPath.sample(rng, 0.01, 64, 2, (5,))
    pairs = fine.increments[0::2] + fine.increments[1::2]
    assert np.array_equal(fine.coarsen().increments, pairs)
    assert np.array_equal(fine.coarsen().coarsen().increments, pairs[0::2] + pairs[1::2])
    assert fine.coarsen().h == 0.02
    with pytest.raises(ValueError):
        BrownianPath.sample(rng, 0.1, 3, 1).coarsen()


def test_refine_sums_back_within_rounding():
    rng = np.random.default_rng(3)
    coarse = BrownianPath.sample(rng, 0.1, 16, 2, (5,))
    fine = coarse.refine(rng)
    assert fine.h == 0.05 and fine.n_steps == 32
    a, b = fine.increments[0::2], fine.increments[1::2]
    err = np.abs(fine.coarsen().increments - coarse.increments)
    assert np.all(err <= np.spacing(np.maximum(np.abs(a), np.abs(b))))


def test_refined_increments_have_correct_variance():
    rng = np.random.default_rng(8)
    coarse = BrownianPath.sample(rng, 0.2, 1, 1, (200_000,))
    fine = coarse.refine(rng)
    assert np.var(fine.increments[0]) == pytest.approx(0.1, rel=0.02)
    assert np.corrcoef(fine.increments[0, :, 0], fine.increments[1, :, 0])[0, 1] == pytest.approx(
        0.0, abs=0.01)


def test_kolmogorov_euler_moments():
    samples = euler_terminal(kolmogorov(1.0), np.zeros(2), 0.0, 1.0, 200, 200_000, 0)
    st_ = ensemble_stats(samples)
    exact = kolmogorov_covariance(1.0, 1.0)
    h = 1.0 / 200
    # Euler covariance of alpha * h * sum_k W_{t_k} is exact up to O(h)
    bias = np.array([[0.0, h / 2], [h / 2, h / 2]])
    assert abs(st_.mean[1]) < 0.01
    assert np.all(np.abs(st_.covariance - exact) <= 0.03 * np.abs(exact) + bias)


def test_euler_terminal_independent_of_workers():
    a = euler_terminal(smooth(), np.zeros(2), 0.0, 0.5, 20, 3000, 5, chunk=512, workers=1)
    b = euler_terminal(smooth(), np.zeros(2), 0.0, 0.5, 20, 3000, 5, chunk=512, workers=3)
    assert np.array_equal(a, b)


def test_frozen_simulate_moments():
    fr = solve_transport(smooth(), 0.0, np.array([0.3, -0.2]), 1.0)
    x = np.array([0.5, 0.1])
    draws = frozen_simulate(fr, x, 0.2, 0.9, np.random.default_rng(1), 200_000)
    st_ = ensemble_stats(draws)
    assert np.max(np.abs(st_.mean - fr.mean(0.2, 0.9, x))) < 0.01
    cov = fr.covariance(0.2, 0.9)
    assert np.all(np.abs(st_.covariance - cov) <= 0.03 * np.abs(cov))


def test_frozen_simulate_moment_error_shrinks_with_n():
    fr = solve_transport(kolmogorov(1.0), 0.0, np.zeros(2), 1.0)
    cov = fr.covariance(0.0, 1.0)
    errs = []
    for n in (4_000, 64_000):
        e = []
        for rep in range(20):
            draws = frozen_simulate(fr, np.zeros(2), 0.0, 1.0, np.random.default_rng(rep), n)
            e.append(np.max(np.abs(ensemble_stats(draws).covariance - cov)))
        errs.append(np.mean(e))
    # 16 times the samples: error should drop by about 4
    assert 2.5 < errs[0] / errs[1] < 6.5


def test_frozen_simulate_zero_covariance_returns_mean():
    fr = solve_transport(kolmogorov(1.0), 0.0, np.zeros(2), 1.0)
    out = frozen_simulate(fr, np.array([1.0, 2.0]), 0.5, 0.5, np.random.default_rng(0), 3)
    assert np.array_equal(out, np.tile([1.0, 2.0], (3, 1)))


def test_frozen_and_euler_laws_agree():
    alpha = 1.0
    bins = BinSpec.around(np.zeros(2), np.sqrt(np.diag(kolmogorov_covariance(alpha, 1.0))),
                          bins=13)
    fr = solve_transport(kolmogorov(alpha), 0.0, np.zeros(2), 1.0)
    frozen = frozen_simulate(fr, np.zeros(2), 0.0, 1.0, np.random.default_rng(0), 100_000)
    euler = euler_terminal(kolmogorov(alpha), np.zeros(2), 0.0, 1.0, 200, 100_000, 1)
    l1 = histogram_l1(ensemble_stats(frozen, bins).masses, ensemble_stats(euler, bins).masses)
    assert l1 < 0.05
    exact = integrate_bins(lambda y: kolmogorov_density(alpha, 1.0, np.zeros(2), y), bins)
    assert histogram_l1(ensemble_stats(frozen, bins).masses, exact) < 0.05


def test_ensemble_stats_basics():
    same = np.tile([1.0, -2.0], (10, 1))
    st_ = ensemble_stats(same)
    assert np.array_equal(st_.covariance, np.zeros((2, 2)))
    with pytest.raises(EmptyEnsemble):
        ensemble_stats(np.zeros((1, 2)))
    z = np.random.default_rng(0).standard_normal((100_000, 2))
    bins = BinSpec.around(np.zeros(2), np.ones(2), bins=10)
    st_ = ensemble_stats(z, bins)
    assert np.allclose(st_.covariance, np.eye(2), atol=0.03)
    assert np.array_equal(st_.covariance, st_.covariance.T)
    assert abs(st_.masses.sum() - 1.0) < 1e-12
    assert 0.0 <= st_.outside_fraction < 1e-3
    with pytest.raises(EmptyEnsemble):
        ensemble_stats(z + 100.0, bins)


def test_bin_centers_snap_origin():
    bins = BinSpec.around(np.zeros(2), np.array([1.0, 0.57735]), bins=13, width=4.0)
    c1, c2 = bins.centers()
    assert c1[6] == 0.0 and c2[6] == 0.0


def test_integrate_bins_gaussian():
    bins = BinSpec.around(np.zeros(2), np.ones(2), bins=8, width=3.0)
    pdf = lambda y: np.exp(-0.5 * np.sum(y * y, axis=-1)) / (2 * np.pi)  # noqa: E731
    masses = integrate_bins(pdf, bins)
    from scipy.stats import norm
    edges = bins.edges_x1
    p1 = np.diff(norm.cdf(edges))
    ref = np.outer(p1, p1) / p1.sum() ** 2
    assert np.max(np.abs(masses - ref)) < 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ensemble_stats_order_independent(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((500, 2)) * 1e3 + 1e6
    a = ensemble_stats(x)
    b = ensemble_stats(x[rng.permutation(500)])
    assert np.allclose(a.mean, b.mean, rtol=1e-15, atol=0)
    assert np.allclose(a.covariance, b.covariance, rtol=1e-12, atol=0)


def test_identical_paths_have_zero_distance():
    path = BrownianPath.sample(np.random.default_rng(0), 1 / 64, 64, 1, (10,))
    a = euler_simulate(holder(0.8), np.zeros((10, 2)), 0.0, 1.0, path)
    b = euler_simulate(holder(0.8), np.zeros((10, 2)), 0.0, 1.0, path)
    assert np.all(sup_sq_distance(a, b) == 0.0)


def test_refinement_lipschitz_rate():
    table = dual_refinement_experiment(lipschitz(), np.zeros(2), 0.0, 1.0, 2.0 ** -6, 4, 1000, 0)
    assert table.strictly_decreasing()
    assert np.all(table.log2_ratios() >= 0.5)
    assert [r.level for r in table.rows] == [0, 1, 2, 3]


def test_refinement_holder_decreases():
    table = dual_refinement_experiment(holder(0.8), np.zeros(2), 0.0, 1.0, 2.0 ** -6, 4, 1000, 0)
    assert table.strictly_decreasing()


def test_refinement_deterministic_and_worker_independent(tmp_path):
    args = (holder(0.8), np.zeros(2), 0.0, 1.0, 2.0 ** -4, 3, 700, 9)
    a = dual_refinement_experiment(*args, chunk=128, workers=1)
    b = dual_refinement_experiment(*args, chunk=128, workers=4)
    assert np.array_equal(a.values(), b.values())
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "level,h,mean_sq_sup_dist,stderr,n_paths,seed"


def test_refinement_argument_checks():
    with pytest.raises(ValueError):
        dual_refinement_experiment(lipschitz(), np.zeros(2), 0.0, 1.0, 0.3, 2, 10, 0)
    with pytest.raises(ValueError):
        dual_refinement_experiment(lipschitz(), np.zeros(2), 0.0, 1.0, 0.25, 1, 10, 0)
    with pytest.raises(ValueError):
        dual_refinement_experiment(lipschitz(), np.zeros(2), 0.0, 1.0, 0.25, 2, 1, 0)
