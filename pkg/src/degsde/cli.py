"""Command-line entry point: ``degsde <subcommand> [flags]``.

Every subcommand writes ``<out>/<subcommand>.csv`` and
``<out>/<subcommand>.summary.json``. Exit status is 0 when all checks pass,
1 when a tolerance is breached and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .coefficients import (PRESETS, CoefficientSet, MollifierConfig, convolve, linear_gamma)
from .errors import DegsdeError, NoContraction
from .kernel import (ADMISSIBLE_ORDERS, DerivOrder, kolmogorov_density, qtilde_density,
                     qtilde_derivative)
from .parametrix import (GridSpec, PicardConfig, centering_check, derivative_diagnostics,
                         holder_source, manufactured_problem, picard_solve, pde_residual,
                         solver_report)
from .sde_sim import (BinSpec, dual_refinement_experiment, ensemble_stats, euler_terminal,
                      histogram_l1, integrate_bins)
from .transport import kolmogorov_covariance, solve_transport

SUBCOMMANDS = ("kolmogorov", "scaling", "uniqueness", "solve", "mollify", "centering")

# Pass/fail thresholds; each can be overridden with --tol NAME=VALUE.
THRESHOLDS = {
    "kolmogorov.hist_l1": 0.05,
    "kolmogorov.oracle_rel": 1e-6,
    "kolmogorov.cov_rel": 0.03,
    "kolmogorov.sigma_abs": 1e-9,
    "scaling.slope_abs": 0.05,
    "uniqueness.lipschitz_log2_ratio": 0.5,
    "solve.max_rel_error": 0.02,
    "solve.pde_residual_rel": 0.05,
    "solve.contraction_ratio": 0.5,
    "mollify.slope_abs": 0.15,
    "mollify.containment_atol": 1e-12,
    "centering.residual": 1e-3,
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _tol_pair(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    name, value = text.split("=", 1)
    if name not in THRESHOLDS:
        raise argparse.ArgumentTypeError(f"unknown threshold {name!r}")
    return name, float(value)


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default=None)
    common.add_argument("--alpha", type=float, default=1.0)
    common.add_argument("--beta", type=float, default=0.8)
    common.add_argument("--T", type=float, default=None)
    common.add_argument("--s", type=float, default=1.0, help="transition time (kolmogorov)")
    common.add_argument("--steps", type=int, default=None)
    common.add_argument("--paths", type=int, default=None)
    common.add_argument("--levels", type=int, default=None)
    common.add_argument("--h0", type=float, default=2.0 ** -6)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--grid", type=int, default=None)
    common.add_argument("--gamma", type=float, default=0.3)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--problem", choices=("manufactured", "holder-source"),
                        default="manufactured")
    common.add_argument("--tol", type=_tol_pair, action="append", default=[],
                        metavar="NAME=VALUE")
    common.add_argument("--out", default=".")
    parser = Parser(prog="degsde",
                    description="Experiments on degenerate Kolmogorov-type SDEs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                parser_class=Parser)
    helps = {
        "kolmogorov": "closed-form density/covariance against simulation",
        "scaling": "derivative and inverse-covariance scaling exponents",
        "uniqueness": "shared-noise refinement table",
        "solve": "Picard solution of the backward PDE with diagnostics",
        "mollify": "mollification convergence and convex containment",
        "centering": "residuals of the centering identities",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _coeffs(args, default: str) -> CoefficientSet:
    name = args.preset or default
    if name == "kolmogorov":
        return PRESETS[name](args.alpha)
    if name == "holder":
        return PRESETS[name](args.beta)
    if name == "linear-gamma":
        return linear_gamma([[args.alpha]], beta=args.beta)
    return PRESETS[name]()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# --------------------------------------------------------------------------
# subcommands; each returns (header, rows, summary, passed)


def run_kolmogorov(args, tol):
    alpha, s = args.alpha, args.s
    paths = args.paths or 200_000
    steps = args.steps or 200
    coeffs = PRESETS["kolmogorov"](alpha)
    x0 = np.zeros(2)
    exact = kolmogorov_covariance(alpha, s)
    sd = np.sqrt(np.diag(exact))
    bins = BinSpec.around(x0, sd, bins=13, width=4.0)
    samples = euler_terminal(coeffs, x0, 0.0, s, steps, paths, args.seed, workers=args.workers)
    stats = ensemble_stats(samples, bins)
    exact_mass = integrate_bins(lambda y: kolmogorov_density(alpha, s, x0, y), bins)
    l1 = histogram_l1(stats.masses, exact_mass)

    frame0 = solve_transport(coeffs, 0.0, x0, s)
    sigma_err = float(np.max(np.abs(frame0.covariance(0.0, s) - exact)))
    # Euler-discrete covariance: X2 = alpha h sum_k W_{t_k}
    h = s / steps
    k = np.arange(steps)
    euler_cov = np.array([
        [s, alpha * h * h * k.sum()],
        [alpha * h * h * k.sum(), alpha ** 2 * h ** 3 * np.minimum.outer(k, k).sum()],
    ])
    bias = np.abs(euler_cov - exact)
    cov_ok = bool(np.all(np.abs(stats.covariance - exact)
                         <= tol["kolmogorov.cov_rel"] * np.abs(exact) + bias))
    cov_rel = (np.abs(stats.covariance - exact) / np.abs(exact)).tolist()

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(1000):
        si = float(rng.uniform(0.1, 2.0))
        xi = rng.uniform(-1.0, 1.0, 2)
        cov = kolmogorov_covariance(alpha, si)
        mean = np.array([xi[0], xi[1] + alpha * si * xi[0]])
        yi = mean + np.linalg.cholesky(cov) @ rng.standard_normal(2)
        fr = solve_transport(coeffs, 0.0, xi, si)
        ref = kolmogorov_density(alpha, si, xi, yi)
        worst = max(worst, abs(float(qtilde_density(fr, 0.0, xi, si, yi)) - ref) / ref)

    centers1, centers2 = bins.centers()
    rows = []
    for i, c1 in enumerate(centers1):
        for j, c2 in enumerate(centers2):
            y = np.array([c1, c2])
            rows.append((i, j, c1, c2, float(kolmogorov_density(alpha, s, x0, y)),
                         float(qtilde_density(frame0, 0.0, x0, s, y)),
                         float(exact_mass[i, j]), float(stats.masses[i, j])))
    header = ["bin1", "bin2", "y1", "y2", "closed_form", "qtilde", "exact_mass", "empirical_mass"]
    checks = {
        "hist_l1": (l1, l1 < tol["kolmogorov.hist_l1"]),
        "oracle_rel": (worst, worst < tol["kolmogorov.oracle_rel"]),
        "sigma_abs": (sigma_err, sigma_err < tol["kolmogorov.sigma_abs"]),
        "empirical_cov": (cov_rel, cov_ok),
    }
    summary = {
        "empirical_mean": stats.mean.tolist(),
        "empirical_covariance": stats.covariance.tolist(),
        "exact_covariance": exact.tolist(),
        "euler_bias_allowance": bias.tolist(),
        "outside_fraction": stats.outside_fraction,
        "density_at_mean": float(kolmogorov_density(alpha, s, x0, x0)),
    }
    return header, rows, summary, checks


def scaling_sweep(alpha: float = 1.0, ks=range(2, 9), grid: int = 81, width: float = 6.0):
    """Sup over a whitened grid of |derivative| for each admissible order and step."""
    coeffs = PRESETS["kolmogorov"](alpha)
    x = np.zeros(2)
    zs = np.linspace(-width, width, grid)
    zz = np.stack(np.meshgrid(zs, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    hs = np.array([2.0 ** -k for k in ks])
    sups = {o: [] for o in ADMISSIBLE_ORDERS}
    blocks = []
    for h in hs:
        frame = solve_transport(coeffs, 0.0, x, h)
        lower = frame.cholesky(0.0, h)
        y = frame.mean(0.0, h, x) + zz @ lower.T
        for o in ADMISSIBLE_ORDERS:
            sups[o].append(float(np.max(np.abs(qtilde_derivative(frame, 0.0, x, h, y, o)))))
        inv = np.linalg.inv(frame.covariance(0.0, h))
        blocks.append([abs(inv[0, 0]), abs(inv[0, 1]), abs(inv[1, 1])])
    return hs, sups, np.array(blocks)


def run_scaling(args, tol):
    hs, sups, blocks = scaling_sweep(args.alpha)
    rows, checks, slopes = [], {}, {}
    for o, vals in sups.items():
        label = f"x1^{o.n_x1} x2^{o.n_x2} y1^{o.n_y1}"
        sl = _slope(hs, vals)
        expected = o.scaling_exponent(1)
        slopes[label] = {"slope": sl, "expected": expected}
        checks[f"order {label}"] = (sl, abs(sl - expected) <= tol["scaling.slope_abs"])
        for h, v in zip(hs, vals):
            rows.append(("derivative", label, h, v))
    for b, (name, expected) in enumerate((("inv11", -1.0), ("inv12", -2.0), ("inv22", -3.0))):
        sl = _slope(hs, blocks[:, b])
        slopes[name] = {"slope": sl, "expected": expected}
        checks[f"block {name}"] = (sl, abs(sl - expected) <= tol["scaling.slope_abs"])
        for h, v in zip(hs, blocks[:, b]):
            rows.append(("inverse_covariance", name, h, v))
    return ["kind", "label", "h", "sup_abs"], rows, {"slopes": slopes}, checks


def run_uniqueness(args, tol):
    name = args.preset or "holder"
    coeffs = _coeffs(args, "holder")
    T = args.T or 1.0
    levels = args.levels or 5
    paths = args.paths or 1000
    table = dual_refinement_experiment(coeffs, np.zeros(2 * coeffs.d), 0.0, T, args.h0, levels,
                                       paths, args.seed, workers=args.workers)
    rows = [(r.level, r.h, r.mean_sq_sup_dist, r.stderr, r.n_paths, r.seed) for r in table.rows]
    ratios = table.log2_ratios().tolist()
    checks = {"strictly_decreasing": (table.values().tolist(), table.strictly_decreasing())}
    if name == "lipschitz":
        lim = tol["uniqueness.lipschitz_log2_ratio"]
        checks["log2_ratio"] = (ratios, bool(min(ratios) >= lim))
    header = ["level", "h", "mean_sq_sup_dist", "stderr", "n_paths", "seed"]
    return header, rows, {"log2_ratios": ratios}, checks


def run_solve(args, tol):
    coeffs = _coeffs(args, "holder")
    T = args.T or 0.25
    n = args.grid or 31
    steps = args.steps or 11
    spec = GridSpec(T, n_time=steps, n_space=n)
    cfg = PicardConfig()
    if args.problem == "manufactured":
        phi, u_star = manufactured_problem(coeffs, T)
    else:
        phi, u_star = holder_source(args.beta), None
    checks = {}
    try:
        sol = picard_solve(coeffs, phi, T, cfg, spec)
    except NoContraction as exc:
        summary = {"error": str(exc), "contraction_ratios": exc.ratios}
        return ["t", "x1", "x2", "u"], [], summary, {"contraction": (exc.ratios, False)}
    diag = derivative_diagnostics(sol, args.gamma)
    report = solver_report(sol, diag)
    nodes = spec.nodes()
    res = pde_residual(sol, phi)
    phi_max = max(float(np.max(np.abs(phi(t, nodes)))) for t in sol.times)
    report["pde_residual_rel"] = float(res.max()) / phi_max if phi_max > 0 else 0.0
    checks["terminal_zero"] = (0.0, bool(np.all(sol.u[-1] == 0.0)))
    lim = tol["solve.contraction_ratio"]
    checks["contraction"] = (sol.ratios, all(r < lim for r in sol.ratios))
    if u_star is not None:
        exact = np.stack([u_star.value(t, nodes) for t in sol.times])
        err = float(np.max(np.abs(sol.u - exact)) / np.max(np.abs(exact)))
        report["max_rel_error"] = err
        checks["max_rel_error"] = (err, err < tol["solve.max_rel_error"])
        checks["pde_residual"] = (report["pde_residual_rel"],
                                  report["pde_residual_rel"] < tol["solve.pde_residual_rel"])
    rows = []
    f = sol.fields
    for k, t in enumerate(sol.times):
        for i, a in enumerate(sol.axes[0]):
            for j, b in enumerate(sol.axes[1]):
                rows.append((t, a, b, sol.u[k, i, j], f["D1u"][k, i, j, 0], f["D2u"][k, i, j, 0],
                             f["D1sqU"][k, i, j, 0, 0], f["D1D2u"][k, i, j, 0, 0]))
    header = ["t", "x1", "x2", "u", "D1u", "D2u", "D1sqU", "D1D2u"]
    return header, rows, report, checks


def mollify_sweep(beta: float = 0.8, ns=(4, 8, 16, 32, 64, 128), points: int = 10001):
    """Sup-grid error of the mollified |x2|^beta on [-2, 2] for each n."""
    f = lambda t, x1, x2: np.abs(x2) ** beta  # noqa: E731
    x2 = np.linspace(-2.0, 2.0, points)[:, None]
    x1 = np.zeros_like(x2)
    target = f(0.0, x1, x2)[:, 0]
    errs = []
    for n in ns:
        approx = convolve(f, 1, MollifierConfig(n))(0.0, x1, x2)[:, 0]
        errs.append(float(np.max(np.abs(approx - target))))
    return np.array(ns, dtype=float), np.array(errs)


def containment_sweep(ns=(4, 8, 16, 32, 64, 128), points: int = 2001):
    """Mollified D1F2 of F2 = 1.25 x1 + 0.75 sin(x1) + x2 against the box [0.5, 2]."""
    d1f2 = lambda t, x1, x2: (1.25 + 0.75 * np.cos(x1) + 0.0 * x2)[..., None]  # noqa: E731
    x1 = np.linspace(-4.0, 4.0, points)[:, None]
    x2 = np.zeros_like(x1)
    lo, hi = np.inf, -np.inf
    for n in ns:
        vals = convolve(d1f2, 1, MollifierConfig(n))(0.0, x1, x2)
        lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
    return lo, hi


def run_mollify(args, tol):
    ns, errs = mollify_sweep(args.beta)
    sl = _slope(ns, errs)
    lo, hi = containment_sweep()
    atol = tol["mollify.containment_atol"]
    rows = [(int(n), e) for n, e in zip(ns, errs)]
    checks = {
        "slope": (sl, abs(sl + args.beta) <= tol["mollify.slope_abs"]),
        "containment": ([lo, hi], lo >= 0.5 - atol and hi <= 2.0 + atol),
    }
    summary = {"slope": sl, "expected_slope": -args.beta, "d1f2_range": [lo, hi],
               "constants": {"c1": MollifierConfig(1).c1(1), "c2": MollifierConfig(1).c2}}
    return ["n", "sup_error"], rows, summary, checks


def centering_cases(nodes: int = 48):
    """Residuals of the three centering identities on the smooth preset."""
    coeffs = PRESETS["smooth"]()
    x = np.array([0.3, -0.2])
    frame = solve_transport(coeffs, 0.0, x, 1.0)
    t, s = 0.0, 0.5
    f_quad = lambda s_, y: y[..., 1] ** 2  # noqa: E731
    f_mix = lambda s_, y: np.sin(y[..., 0]) + y[..., 0] * y[..., 1] + 0.5 * y[..., 1] ** 2  # noqa: E731
    g_mix = lambda s_, y: np.cos(y[..., 1]) + y[..., 0] * y[..., 1]  # noqa: E731
    one = lambda s_, y: np.ones(np.shape(y)[:-1])  # noqa: E731
    cases = [
        ("a", "x2", f_mix, None, DerivOrder(n_x2=1)),
        ("a", "x1", f_mix, None, DerivOrder(n_x1=1)),
        ("a", "x1x2", f_mix, None, DerivOrder(n_x1=1, n_x2=1)),
        ("b", "x2", f_quad, None, DerivOrder(n_x2=1)),
        ("b", "x1x2", f_mix, None, DerivOrder(n_x1=1, n_x2=1)),
        ("c", "x2", f_mix, g_mix, DerivOrder(n_x2=1)),
        ("c", "x2", f_mix, one, DerivOrder(n_x2=1)),
        ("c", "x1x2", f_mix, g_mix, DerivOrder(n_x1=1, n_x2=1)),
    ]
    out = []
    for variant, label, f, g, order in cases:
        res, lhs, rhs = centering_check(frame, f, g, order, variant, t, x, s, nodes=nodes,
                                        return_sides=True)
        out.append((variant, label, res, float(np.ravel(lhs)[0]), float(np.ravel(rhs)[0])))
    return out


def run_centering(args, tol):
    cases = centering_cases()
    lim = tol["centering.residual"]
    checks = {f"{v} {lab} #{i}": (r, r < lim) for i, (v, lab, r, _, _) in enumerate(cases)}
    return ["variant", "order", "residual", "lhs", "rhs"], cases, {"nodes": 48}, checks


RUNNERS = {
    "kolmogorov": run_kolmogorov,
    "scaling": run_scaling,
    "uniqueness": run_uniqueness,
    "solve": run_solve,
    "mollify": run_mollify,
    "centering": run_centering,
}


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"degsde: error: {exc}", file=sys.stderr)
        return 2
    if args.command is None:
        print("degsde: error: a subcommand is required", file=sys.stderr)
        return 2
    tol = dict(THRESHOLDS)
    tol.update(dict(args.tol))
    try:
        header, rows, summary, checks = RUNNERS[args.command](args, tol)
    except DegsdeError as exc:
        print(f"degsde: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"degsde: error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, f"{args.command}.csv"), header, rows)
    passed = all(ok for _, ok in checks.values())
    config = {k: v for k, v in vars(args).items() if k != "tol"}
    doc = {
        "command": args.command,
        "config": config,
        "thresholds": tol,
        "seed": args.seed,
        "checks": {k: {"value": val, "pass": ok} for k, (val, ok) in checks.items()},
        "passed": passed,
        "results": summary,
    }
    with open(os.path.join(args.out, f"{args.command}.summary.json"), "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
    for name, (_, ok) in checks.items():
        print(f"{args.command}: {name}: {'PASS' if ok else 'FAIL'}")
    return 0 if passed else 1


def main() -> None:
    try:
        code = run()
    except SystemExit as exc:  # --help / --version
        code = exc.code if isinstance(exc.code, int) else 0
    sys.exit(code)


if __name__ == "__main__":
    main()
