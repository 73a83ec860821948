"""Euler simulation of the degenerate SDE, exact sampling of the frozen system,
and shared-noise refinement experiments.

Random numbers are drawn chunk by chunk: paths are grouped in fixed-size
chunks and chunk ``k`` always uses child ``k`` of ``SeedSequence(seed)``, so
results do not depend on how chunks are distributed over workers.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, split
from .errors import EmptyEnsemble
from .gaussian_core import CholeskyFactor, mvn_sample
from .transport import FrozenFrame

DEFAULT_CHUNK = 8192


def chunk_streams(seed: int, n_paths: int, chunk: int = DEFAULT_CHUNK):
    """``(start, stop, Generator)`` per fixed-size chunk of path indices."""
    n_chunks = max(1, math.ceil(n_paths / chunk))
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    return [
        (k * chunk, min(n_paths, (k + 1) * chunk), np.random.default_rng(children[k]))
        for k in range(n_chunks)
    ]


def _map_chunks(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class BrownianPath:
    """Brownian increments on a uniform grid; ``increments`` has shape (n_steps, ..., d)."""

    h: float
    increments: np.ndarray
    seed: int | None = None
    t0: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[-1]

    @property
    def horizon(self) -> float:
        return self.t0 + self.n_steps * self.h

    @classmethod
    def sample(cls, rng: np.random.Generator, h: float, n_steps: int, d: int,
               batch: tuple = (), seed: int | None = None, t0: float = 0.0) -> "BrownianPath":
        inc = math.sqrt(h) * rng.standard_normal((n_steps,) + tuple(batch) + (d,))
        return cls(h, inc, seed, t0)

    def coarsen(self) -> "BrownianPath":
        """Path at step ``2h`` whose increments are the pairwise sums of this one."""
        if self.n_steps % 2:
            raise ValueError("coarsening needs an even number of steps")
        inc = self.increments[0::2] + self.increments[1::2]
        return BrownianPath(2 * self.h, inc, self.seed, self.t0)

    def refine(self, rng: np.random.Generator) -> "BrownianPath":
        """Path at step ``h/2`` obtained by splitting every increment conditionally.

        Given an increment ``D`` over ``h``, the first half is drawn from
        N(D/2, h/4) and the second half is ``D`` minus the first. Pairwise sums
        reproduce ``D`` up to one rounding of that subtraction; bit-exact
        nesting is obtained by drawing the finest level and calling
        :meth:`coarsen`, as :func:`dual_refinement_experiment` does.
        """
        big = self.increments
        first = 0.5 * big + math.sqrt(self.h / 4.0) * rng.standard_normal(big.shape)
        second = big - first
        fine = np.empty((2 * big.shape[0],) + big.shape[1:])
        fine[0::2] = first
        fine[1::2] = second
        return BrownianPath(self.h / 2.0, fine, self.seed, self.t0)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, ..., 2d)
    driving: BrownianPath | None = None

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def euler_step(coeffs: CoefficientSet, t: float, state: np.ndarray, h: float,
               dw: np.ndarray) -> np.ndarray:
    """One Euler step; noise enters the first block only."""
    d = coeffs.d
    x1, x2 = split(state, d)
    noise = np.einsum("...ij,...j->...i", coeffs.sigma(t, x1, x2), dw)
    new1 = x1 + coeffs.F1(t, x1, x2) * h + noise
    new2 = x2 + coeffs.F2(t, x1, x2) * h
    return np.concatenate([new1, new2], axis=-1)


def euler_simulate(coeffs: CoefficientSet, x, t: float, T: float,
                   path: BrownianPath) -> Trajectory:
    """Euler scheme on the grid of ``path``, which must cover [t, T]."""
    n = path.n_steps
    if abs(t + n * path.h - T) > 1e-9 * max(1.0, abs(T)) or abs(path.t0 - t) > 1e-12:
        raise ValueError("Brownian path does not cover [t, T] at its step")
    x = np.asarray(x, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], path.increments.shape[1:-1])
    states = np.empty((n + 1,) + batch + (2 * coeffs.d,))
    states[0] = x
    times = t + path.h * np.arange(n + 1)
    times[-1] = T
    for k in range(n):
        states[k + 1] = euler_step(coeffs, times[k], states[k], path.h, path.increments[k])
    return Trajectory(times, states, path)


def euler_terminal(coeffs: CoefficientSet, x, t: float, T: float, n_steps: int,
                   n_paths: int, seed: int, chunk: int = DEFAULT_CHUNK,
                   workers: int = 1) -> np.ndarray:
    """Terminal Euler states of ``n_paths`` independent paths, shape (n_paths, 2d)."""
    h = (T - t) / n_steps
    x = np.asarray(x, dtype=float)
    d = coeffs.d

    def run(item):
        lo, hi, rng = item
        state = np.broadcast_to(x, (hi - lo, 2 * d)).copy()
        for k in range(n_steps):
            dw = math.sqrt(h) * rng.standard_normal((hi - lo, d))
            state = euler_step(coeffs, t + k * h, state, h, dw)
        return state

    parts = _map_chunks(run, chunk_streams(seed, n_paths, chunk), workers)
    return np.concatenate(parts, axis=0)


def frozen_simulate(frame: FrozenFrame, x, t: float, s: float, rng: np.random.Generator,
                    n: int = 1) -> np.ndarray:
    """Exact draws of the frozen process at ``s`` started from ``x`` at ``t``; shape (n, 2d)."""
    m = frame.mean(t, s, x)
    cov = frame.covariance(t, s)
    if not np.any(cov):
        return np.broadcast_to(m, (n,) + m.shape).copy()
    lower = frame.cholesky(t, s)
    return mvn_sample(m, CholeskyFactor(lower), rng, n)


# --------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class BinSpec:
    edges_x1: np.ndarray
    edges_x2: np.ndarray

    @classmethod
    def around(cls, center, scale, bins: int = 12, width: float = 4.0) -> "BinSpec":
        c = np.asarray(center, dtype=float)
        s = np.asarray(scale, dtype=float)
        return cls(np.linspace(c[0] - width * s[0], c[0] + width * s[0], bins + 1),
                   np.linspace(c[1] - width * s[1], c[1] + width * s[1], bins + 1))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Bin midpoints per axis; round-off below 1e-12 of the bin width is snapped to 0."""
        out = []
        for e in (self.edges_x1, self.edges_x2):
            c = 0.5 * (e[1:] + e[:-1])
            c[np.abs(c) < 1e-12 * (e[1] - e[0])] = 0.0
            out.append(c)
        return out[0], out[1]


@dataclass
class EnsembleStats:
    count: int
    mean: np.ndarray
    covariance: np.ndarray
    edges: tuple = ()
    masses: np.ndarray | None = None
    outside_fraction: float = 0.0


def _fsum_mean(cols: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(c) for c in cols.T]) / cols.shape[0]


def ensemble_stats(samples, bins: BinSpec | None = None) -> EnsembleStats:
    """Mean, unbiased covariance and (optionally) a normalized 2-d histogram.

    ``samples`` is an (n, dim) array or a :class:`Trajectory` (terminal states
    are used). Histogram masses are normalized over the samples falling in
    the bin range; the remaining fraction is reported separately.
    """
    if isinstance(samples, Trajectory):
        samples = samples.terminal
    xs = np.asarray(samples, dtype=float)
    if xs.ndim != 2 or xs.shape[0] < 2:
        raise EmptyEnsemble("need at least two samples")
    n, dim = xs.shape
    mu = _fsum_mean(xs)
    c = xs - mu
    cov = np.empty((dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            cov[i, j] = cov[j, i] = math.fsum(c[:, i] * c[:, j]) / (n - 1)
    stats = EnsembleStats(n, mu, cov)
    if bins is not None:
        counts, ex, ey = np.histogram2d(xs[:, 0], xs[:, 1], bins=[bins.edges_x1, bins.edges_x2])
        inside = counts.sum()
        if inside == 0:
            raise EmptyEnsemble("no sample falls inside the histogram range")
        stats.edges = (ex, ey)
        stats.masses = counts / inside
        stats.outside_fraction = float(1.0 - inside / n)
    return stats


def integrate_bins(pdf, bins: BinSpec, nodes: int = 8) -> np.ndarray:
    """Per-bin integrals of a 2-d density by tensor Gauss-Legendre, normalized to sum 1."""
    g, w = np.polynomial.legendre.leggauss(nodes)

    def mapped(edges):
        lo, hi = edges[:-1, None], edges[1:, None]
        pts = 0.5 * (hi - lo) * g + 0.5 * (hi + lo)
        return pts, 0.5 * (hi - lo) * w

    px, wx = mapped(np.asarray(bins.edges_x1, dtype=float))
    py, wy = mapped(np.asarray(bins.edges_x2, dtype=float))
    xx = px[:, None, :, None]
    yy = py[None, :, None, :]
    vals = pdf(np.stack(np.broadcast_arrays(xx, yy), axis=-1))
    masses = np.einsum("ijab,ia,jb->ij", vals, wx, wy)
    return masses / masses.sum()


def histogram_l1(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# --------------------------------------------------------------------------
# shared-noise refinement


def sup_sq_distance(coarse: Trajectory, fine: Trajectory) -> np.ndarray:
    """Squared sup over the coarse grid of |X^(h) - X^(h/2)| (per path)."""
    ratio = fine.states.shape[0] - 1
    ratio //= coarse.states.shape[0] - 1
    diff = coarse.states - fine.states[::ratio]
    dist = np.linalg.norm(diff, axis=-1)
    return np.max(dist, axis=0) ** 2


@dataclass
class RefinementRow:
    level: int
    h: float
    mean_sq_sup_dist: float
    stderr: float
    n_paths: int
    seed: int


@dataclass
class RefinementTable:
    rows: list[RefinementRow] = field(default_factory=list)

    def values(self) -> np.ndarray:
        return np.array([r.mean_sq_sup_dist for r in self.rows])

    def log2_ratios(self) -> np.ndarray:
        v = self.values()
        return np.log2(v[:-1] / v[1:])

    def strictly_decreasing(self) -> bool:
        v = self.values()
        return bool(np.all(v[1:] < v[:-1]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "h", "mean_sq_sup_dist", "stderr", "n_paths", "seed"])
            for r in self.rows:
                w.writerow([r.level, f"{r.h:.17g}", f"{r.mean_sq_sup_dist:.17g}",
                            f"{r.stderr:.17g}", r.n_paths, r.seed])


def dual_refinement_experiment(coeffs: CoefficientSet, x, t: float, T: float, h0: float,
                               levels: int, n_paths: int, seed: int,
                               chunk: int = 512, workers: int = 1) -> RefinementTable:
    """Mean squared sup-distance between Euler paths at steps h and h/2 under shared noise.

    Level ``k`` compares steps ``h0 / 2^k`` and ``h0 / 2^(k+1)``. The finest
    increments are drawn once per chunk and every coarser path is obtained by
    pairwise summation, so all levels see the same Brownian path.
    """
    if levels < 2:
        raise ValueError("need at least two levels")
    if n_paths < 2:
        raise ValueError("need at least two paths")
    n0 = round((T - t) / h0)
    if n0 < 1 or abs(n0 * h0 - (T - t)) > 1e-9:
        raise ValueError("h0 must divide the horizon")
    d = coeffs.d
    x = np.asarray(x, dtype=float)
    h_fine = h0 / 2 ** levels

    def run(item):
        lo, hi, rng = item
        path = BrownianPath.sample(rng, h_fine, n0 * 2 ** levels, d, (hi - lo,), seed, t)
        paths = [path]
        for _ in range(levels):
            paths.append(paths[-1].coarsen())
        paths.reverse()  # paths[k] has step h0 / 2^k
        start = np.broadcast_to(x, (hi - lo, 2 * d))
        trajs = [euler_simulate(coeffs, start, t, T, p) for p in paths]
        return [sup_sq_distance(trajs[k], trajs[k + 1]) for k in range(levels)]

    parts = _map_chunks(run, chunk_streams(seed, n_paths, chunk), workers)
    table = RefinementTable()
    for k in range(levels):
        vals = np.concatenate([p[k] for p in parts])
        m = math.fsum(vals) / vals.size
        var = math.fsum((vals - m) ** 2) / (vals.size - 1)
        table.rows.append(RefinementRow(k, h0 / 2 ** k, m, math.sqrt(var / vals.size),
                                        n_paths, seed))
    return table
