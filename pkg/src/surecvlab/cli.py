"""Command-line front end: configure a study, run it, write a CSV table.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 reference mismatch under ``--check``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from importlib import resources

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    Key,
    as_bool,
    as_float,
    as_grid,
    as_int,
    as_int_list,
    as_matrix,
    as_vector,
    choice,
    parse_overrides,
    read_config,
    resolve,
    str_list,
)
from .cv import cv_curve, cv_sure_gap, tune_cv
from .erm import LossModel, fit_erm, influence_estimate
from .errors import ConvergenceError, InvalidInputError, RankDeficientError, StudyAbortedError
from .risk import (
    PLAIN,
    POSITIVE_PART,
    DgpSpec,
    McConfig,
    js_risk,
    risk_cv,
    risk_sure_limit,
    simulate_dataset,
)
from .shrinkage import PenaltySpec, prox
from .sure import (
    _lasso_candidates,
    _ridge_local_minima,
    minimize_sure,
    sawtooth_profile,
    sure,
    sure_curve,
)

log = logging.getLogger("surecvlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
SEED_ENV = "SURECVLAB_SEED"


class CheckFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Shared config pieces
# ---------------------------------------------------------------------------

PENALTY_KEYS = {
    "penalty": Key(choice("ridge", "lasso"), "ridge", "penalty family"),
    "A": Key(as_matrix, "identity", "penalty shape matrix"),
}
INSTANCE_KEYS = {
    **PENALTY_KEYS,
    "theta": Key(as_vector, None, "estimate theta_hat (local scale)"),
    "sigma": Key(as_matrix, "identity", "covariance of theta_hat"),
}
DGP_KEYS = {
    **PENALTY_KEYS,
    "model": Key(choice("linear", "logistic"), "linear", "loss model"),
    "theta0": Key(as_vector, None, "local parameter theta0"),
    "sigma_noise": Key(as_float, "1", "noise sd (linear model)"),
    "lambdas": Key(as_grid, "logspace(0.01, 30, 20)", "tuning grid"),
    "mode": Key(choice("exact", "approx"), "exact", "leave-one-out mode"),
}

FIG2_THETA_LASSO = "0.3535533905932738, 1.0606601717798212, 2"
PRESETS_INSTANCE = {
    "figure2-ridge": {"penalty": "ridge", "A": "diag(1, 40)", "theta": "1.3893, 1.5",
                      "sigma": "identity", "lambdas": "0 + logspace(0.01, 50, 400)"},
    "figure2-lasso": {"penalty": "lasso", "A": "identity", "theta": FIG2_THETA_LASSO,
                      "sigma": "identity", "lambdas": "linspace(0, 2.5, 251)"},
}
REFERENCE_FILES = {"figure2-ridge": "figure2_ridge.csv", "figure2-lasso": "figure2_lasso.csv"}


def _matrix(spec, k, what):
    if isinstance(spec, str):
        return np.eye(k)
    if spec.shape != (k, k):
        raise ConfigError(f"{what} must be {k}x{k}, got {spec.shape[0]}x{spec.shape[1]}")
    return spec


def _penalty(cfg, k) -> PenaltySpec:
    A = _matrix(cfg["A"], k, "A")
    try:
        return PenaltySpec(cfg["penalty"], A)
    except InvalidInputError as exc:
        raise ConfigError(f"key 'A': {exc}") from None


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise ConfigError(f"missing required key {key!r}")


def _grid(cfg, key="lambdas", allow_all=False):
    g = cfg[key]
    if isinstance(g, str):
        if allow_all:
            return g
        raise ConfigError(f"key {key!r}: 'all' is not allowed here")
    if g.size == 0:
        raise ConfigError(f"key {key!r}: grid is empty")
    if np.any(g < 0):
        raise ConfigError(f"key {key!r}: grid values must be non-negative")
    if np.any(np.diff(g) <= 0):
        raise ConfigError(f"key {key!r}: grid must be strictly increasing without duplicates")
    return g


def _dgp(cfg) -> DgpSpec:
    _require(cfg, "theta0")
    k = cfg["theta0"].size
    model = LossModel(cfg["model"], k)
    if cfg["sigma_noise"] <= 0:
        raise ConfigError("key 'sigma_noise' must be positive")
    return DgpSpec(cfg["theta0"], model, cfg["sigma_noise"])


def _check_n(n, k, key="n"):
    if n <= k:
        raise ConfigError(f"key {key!r}: need n > k (n={n}, k={k})")


# ---------------------------------------------------------------------------
# Commands. Each returns (header, rows) and may raise CheckFailure.
# ---------------------------------------------------------------------------


def cmd_prox_eval(cfg, check=False):
    """Columns: lambda, theta_1..k, g_1..k, eta, boundary_flag."""
    _require(cfg, "theta")
    theta = cfg["theta"]
    k = theta.size
    pen = _penalty(cfg, k)
    grid = _grid(cfg)
    header = (["lambda"] + [f"theta_{j + 1}" for j in range(k)] + [f"g_{j + 1}" for j in range(k)]
              + ["eta", "boundary_flag"])
    rows = []
    for lam in grid:
        r = prox(pen, lam, theta)
        eta = ";".join(str(int(e)) for e in r.eta)
        rows.append([lam, *theta, *r.g, eta, int(r.boundary_flag)])
    return header, rows


def _landscape_minima(pen, theta, sigma):
    """Rows (lambda, sure, kind) of the minima, ``kind`` in {local, global}."""
    if pen.is_ridge:
        lams, vals, _, _, _ = _ridge_local_minima(pen, theta, sigma)
        best = vals.min()
        return [(l, v, "global_min" if v <= best + 1e-10 else "local_min") for l, v in zip(lams, vals)]
    lams, vals, _ = _lasso_candidates(pen, theta, sigma)
    best = vals.min()
    out = []
    for i, (l, v) in enumerate(zip(lams, vals)):
        if i == len(lams) - 1:
            continue  # tail point duplicates the last breakpoint
        left = vals[i - 1] if i > 0 else math.inf
        right = vals[i + 1]
        if v <= best + 1e-9:
            out.append((l, v, "global_min"))
        elif v <= left and v <= right:
            out.append((l, v, "local_min"))
    return out


def cmd_sure_landscape(cfg, check=False):
    """Columns: lambda, sure, sure_figure, point, local_min, global_min.

    ``sure_figure`` adds ``k`` (plotting convention). ``point`` is ``grid`` for
    requested values and ``minimum`` for detected minima (refined for Ridge,
    right limits at breakpoints for Lasso).
    """
    _require(cfg, "theta")
    theta = cfg["theta"]
    k = theta.size
    pen = _penalty(cfg, k)
    sigma = _matrix(cfg["sigma"], k, "sigma")
    grid = _grid(cfg)
    curve = sure_curve(pen, theta, sigma, grid)
    rows = [[l, v, v + k, "grid", 0, 0] for l, v in zip(curve.lambdas, curve.values)]
    minima = _landscape_minima(pen, theta, sigma)
    for l, v, kind in minima:
        rows.append([l, v, v + k, "minimum", 1, int(kind == "global_min")])
    rows.sort(key=lambda r: (r[0], r[3]))
    if check:
        _check_minima(cfg["preset"], minima)
    return ["lambda", "sure", "sure_figure", "point", "local_min", "global_min"], rows


def _reference(name):
    text = resources.files("surecvlab.reference").joinpath(name).read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def _check_minima(preset, minima):
    if preset not in REFERENCE_FILES:
        raise ConfigError(f"--check needs a preset with a reference table ({', '.join(REFERENCE_FILES)})")
    ref = _reference(REFERENCE_FILES[preset])
    if len(ref) != len(minima):
        raise CheckFailure(f"expected {len(ref)} minima, found {len(minima)}")
    for r, (l, v, kind) in zip(ref, sorted(minima)):
        if abs(float(r["lambda"]) - l) > 1e-3 * max(1.0, l) or abs(float(r["sure"]) - v) > 1e-8 or r["kind"] != kind:
            raise CheckFailure(f"minimum mismatch: reference {dict(r)}, found ({l}, {v}, {kind})")


def cmd_sure_min(cfg, check=False):
    """Columns: lambda_star, sure_star, saturated, flat_tail."""
    _require(cfg, "theta")
    theta = cfg["theta"]
    k = theta.size
    pen = _penalty(cfg, k)
    sigma = _matrix(cfg["sigma"], k, "sigma")
    lam_set = _grid(cfg, allow_all=True)
    m = minimize_sure(pen, theta, sigma, lam_set)
    return ["lambda_star", "sure_star", "saturated", "flat_tail"], [
        [m.lambda_star, m.sure_star, int(m.saturated), int(m.flat_tail)]
    ]


def _dataset(cfg, dgp):
    _check_n(cfg["n"], dgp.k)
    return simulate_dataset(dgp, cfg["n"], cfg["seed"], cfg["rep"])


def cmd_cv_curve(cfg, check=False):
    """Columns: lambda, cv, sure_half (SURE/2 at the unpenalized fit and score covariance)."""
    dgp = _dgp(cfg)
    pen = _penalty(cfg, dgp.k)
    grid = _grid(cfg)
    data = _dataset(cfg, dgp)
    curve = cv_curve(dgp.model, data, pen, grid, cfg["mode"])
    th = fit_erm(dgp.model, data)
    sig = influence_estimate(dgp.model, data, dgp.theta0).sigma_hat
    rows = [[l, c, 0.5 * sure(pen, l, th, sig)] for l, c in zip(curve.lambdas, curve.values)]
    return ["lambda", "cv", "sure_half"], rows


def cmd_tune(cfg, check=False):
    """Columns: lambda_star, theta_star_1..k."""
    dgp = _dgp(cfg)
    pen = _penalty(cfg, dgp.k)
    data = _dataset(cfg, dgp)
    lam, theta = tune_cv(dgp.model, data, pen, _grid(cfg), cfg["mode"])
    return ["lambda_star"] + [f"theta_star_{j + 1}" for j in range(dgp.k)], [[lam, *theta]]


def cmd_convergence_study(cfg, check=False):
    """Columns: n, replication, raw_gap, centered_gap, argmin_cv, argmin_sure, lambda_star_agrees.

    ``lambda_star_agrees`` is 1 when the two argmins differ by less than the
    local grid spacing.
    """
    dgp = _dgp(cfg)
    pen = _penalty(cfg, dgp.k)
    grid = _grid(cfg)
    if cfg["replications"] < 1:
        raise ConfigError("key 'replications' must be at least 1")
    sizes = cfg["sample_sizes"]
    if not sizes:
        raise ConfigError("key 'sample_sizes' is empty")
    for n in sizes:
        _check_n(n, dgp.k, "sample_sizes")
    spacing = np.diff(grid).min() if grid.size > 1 else math.inf
    sigma_true = dgp.limit_sigma() if cfg["true_sigma"] else None
    rows = []
    for n in sizes:
        for rep in range(cfg["replications"]):
            data = simulate_dataset(dgp, n, cfg["seed"], rep)
            g = cv_sure_gap(dgp.model, data, pen, grid, cfg["mode"], theta0=dgp.theta0,
                            sigma_true=sigma_true)
            agree = abs(g.argmin_cv - g.argmin_sure) < spacing
            rows.append([n, rep, g.raw_gap, g.centered_gap, g.argmin_cv, g.argmin_sure, int(agree)])
    return ["n", "replication", "raw_gap", "centered_gap", "argmin_cv", "argmin_sure",
            "lambda_star_agrees"], rows


ESTIMATORS = ("js-plain", "js-positive-part", "cv", "sure-limit")


def _figure1_x():
    return np.array([float(r["x"]) for r in _reference("figure1.csv")])


def cmd_risk_curve(cfg, check=False):
    """Columns: normTheta, estimator, n, risk, stderr.

    ``risk`` is the normalized mean squared error ``E||est - theta0||^2 / k``;
    ``n`` is ``limit`` for normal-means estimators. With
    ``norm_scale = per-coordinate`` the norm column is ``||theta0|| / sqrt(k)``.
    """
    ests = cfg["estimators"]
    for e in ests:
        if e not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
    k = cfg["k"]
    if k < 1:
        raise ConfigError("key 'k' must be positive")
    if any(e.startswith("js") for e in ests) and k < 3:
        raise ConfigError("James-Stein needs k >= 3")
    norms = cfg["norms"]
    if isinstance(norms, str) or norms.size == 0 or np.any(norms < 0):
        raise ConfigError("key 'norms' must be a non-empty grid of non-negative values")
    reps = cfg["replications"]
    if reps < 1:
        raise ConfigError("key 'replications' must be at least 1")
    per_coord = cfg["norm_scale"] == "per-coordinate"
    direction = np.ones(k) if cfg["direction"] is None else cfg["direction"]
    if direction.size != k or not np.any(direction):
        raise ConfigError("key 'direction' must be a nonzero vector of length k")
    direction = direction / np.linalg.norm(direction)
    mc = McConfig(cfg["sample_sizes"], reps, cfg["seed"], cfg["truncation_m"], cfg["threads"])
    rows = []
    for x in norms:
        norm = x * math.sqrt(k) if per_coord else x
        theta0 = norm * direction
        for e in ests:
            if e.startswith("js"):
                variant = PLAIN if e == "js-plain" else POSITIVE_PART
                m, se = js_risk(norm, k, variant, reps, cfg["seed"], return_stderr=True)
                rows.append([x, e, "limit", m, se])
            elif e == "sure-limit":
                pen = _penalty(cfg, k)
                r = risk_sure_limit(theta0, np.eye(k), pen, _grid(cfg, allow_all=True), mc)
                rows.append([x, e, "limit", 2 * r.mean / k, 2 * r.stderr / k])
            else:
                pen = _penalty(cfg, k)
                dgp = DgpSpec(theta0, LossModel(cfg["model"], k))
                for n in cfg["sample_sizes"]:
                    _check_n(n, k, "sample_sizes")
                    r = risk_cv(dgp, n, pen, _grid(cfg), cfg["mode"], mc)
                    rows.append([x, e, n, 2 * r.mean / k, 2 * r.stderr / k])
    if check:
        _check_figure1(rows)
    return ["normTheta", "estimator", "n", "risk", "stderr"], rows


def _check_figure1(rows, tol=0.01):
    ref = {round(float(r["x"]), 10): float(r["risk"]) for r in _reference("figure1.csv")}
    bad = []
    for x, est, _, risk, _ in rows:
        key = round(float(x), 10)
        if est.startswith("js") and key in ref and abs(risk - ref[key]) > tol:
            bad.append(f"x={x}: {risk:.5f} vs {ref[key]:.5f}")
    compared = sum(1 for r in rows if round(float(r[0]), 10) in ref)
    if compared == 0:
        raise CheckFailure("no rows correspond to reference abscissae")
    if bad:
        raise CheckFailure(f"{len(bad)} of {compared} points outside +-{tol}: " + "; ".join(bad[:5]))


def cmd_js_figure(cfg, check=False):
    """Figure-1 style James-Stein risk table (61 rows, per-coordinate norm)."""
    cfg = dict(cfg)
    cfg["estimators"] = ["js-" + cfg["variant"]]
    return cmd_risk_curve(cfg, check)


def cmd_sawtooth(cfg, check=False):
    """Columns: R, lambda_star, segment_index, lambda_star_over_r."""
    _require(cfg, "nu")
    nu = cfg["nu"]
    k = nu.size
    if cfg["penalty"] != "lasso":
        raise ConfigError("sawtooth is defined for the lasso penalty only (set penalty = lasso)")
    pen = _penalty(cfg, k)
    sigma = _matrix(cfg["sigma"], k, "sigma")
    r = cfg["r_grid"]
    if isinstance(r, str) or r.size == 0 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
        raise ConfigError("key 'r_grid' must be a positive increasing grid")
    if cfg["normalize"]:
        nu = nu / np.linalg.norm(nu)
    pts = sawtooth_profile(pen, nu, r, sigma)
    return ["R", "lambda_star", "segment_index", "lambda_star_over_r"], [
        [p.R, p.lambda_star, p.segment_index, p.lambda_over_r] for p in pts
    ]


JS_FIGURE_PRESET = {
    "k": "10",
    "norms": ", ".join(f"{x:g}" for x in np.round(np.arange(61) * 0.1, 10)),
    "norm_scale": "per-coordinate",
    "replications": "1000000",
}

COMMANDS = {
    "prox-eval": (cmd_prox_eval, {**INSTANCE_KEYS, "lambdas": Key(as_grid, "linspace(0, 3, 31)")},
                  PRESETS_INSTANCE),
    "sure-landscape": (cmd_sure_landscape, {**INSTANCE_KEYS, "lambdas": Key(as_grid, "0 + logspace(0.001, 100, 200)")},
                       PRESETS_INSTANCE),
    "sure-min": (cmd_sure_min, {**INSTANCE_KEYS, "lambdas": Key(as_grid, "all")}, PRESETS_INSTANCE),
    "cv-curve": (cmd_cv_curve, {**DGP_KEYS, "n": Key(as_int, "200"), "rep": Key(as_int, "0")}, {}),
    "tune": (cmd_tune, {**DGP_KEYS, "n": Key(as_int, "200"), "rep": Key(as_int, "0")}, {}),
    "convergence-study": (
        cmd_convergence_study,
        {**DGP_KEYS, "sample_sizes": Key(as_int_list, "200, 800"), "replications": Key(as_int, "100"),
         "true_sigma": Key(as_bool, "false")},
        {},
    ),
    "risk-curve": (
        cmd_risk_curve,
        {**PENALTY_KEYS,
         "estimators": Key(str_list, "js-plain"),
         "k": Key(as_int, "10"),
         "norms": Key(as_grid, "linspace(0, 6, 7)"),
         "norm_scale": Key(choice("euclidean", "per-coordinate"), "euclidean"),
         "direction": Key(as_vector, None),
         "replications": Key(as_int, "10000"),
         "sample_sizes": Key(as_int_list, "200"),
         "truncation_m": Key(as_float, "50"),
         "model": Key(choice("linear", "logistic"), "linear"),
         "lambdas": Key(as_grid, "logspace(0.01, 30, 20)"),
         "mode": Key(choice("exact", "approx"), "exact")},
        {"js-figure": {**JS_FIGURE_PRESET, "estimators": "js-plain"}},
    ),
    "js-figure": (
        cmd_js_figure,
        {"k": Key(as_int, "10"), "norms": Key(as_grid, JS_FIGURE_PRESET["norms"]),
         "norm_scale": Key(choice("euclidean", "per-coordinate"), "per-coordinate"),
         "direction": Key(as_vector, None),
         "replications": Key(as_int, "1000000"),
         "variant": Key(choice(PLAIN, POSITIVE_PART), PLAIN)},
        {},
    ),
    "sawtooth": (
        cmd_sawtooth,
        {**PENALTY_KEYS, "penalty": Key(choice("ridge", "lasso"), "lasso"),
         "nu": Key(as_vector, None), "sigma": Key(as_matrix, "identity"),
         "r_grid": Key(as_grid, "linspace(0.25, 8, 32)"), "normalize": Key(as_bool, "true")},
        {"orthogonal": {"penalty": "lasso", "A": "identity", "nu": FIG2_THETA_LASSO,
                        "r_grid": "linspace(0.25, 8, 32)"}},
    ),
}


def _js_figure_cfg(cfg):
    # js-figure reuses risk-curve plumbing; fill keys it does not expose.
    base = {"estimators": None, "sample_sizes": [], "truncation_m": 50.0, "model": "linear",
            "lambdas": np.array([0.0]), "mode": "exact", "penalty": "ridge", "A": "identity"}
    return {**base, **cfg}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def write_csv(header, rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])


def _epilog():
    lines = ["commands and output columns:"]
    for name, (fn, _, presets) in COMMANDS.items():
        doc = (fn.__doc__ or "").strip().splitlines()[0]
        extra = f" presets: {', '.join(presets)}" if presets else ""
        lines.append(f"  {name:18s} {doc}{extra}")
    lines.append("exit codes: 0 ok, 2 config error, 3 numerical failure, 4 --check mismatch")
    lines.append(f"env {SEED_ENV} overrides the seed key")
    return "\n".join(lines)


def build_parser():
    p = argparse.ArgumentParser(
        prog="surecvlab",
        description="SURE and leave-one-out CV tuning of shrinkage estimators.",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (fn, schema, presets) in COMMANDS.items():
        keys = ", ".join(sorted(schema))
        s = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0],
                           description=(fn.__doc__ or "").strip() + f"\n\nconfig keys: seed, out, threads, preset, {keys}",
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("--config", help="flat key = value configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")
        s.add_argument("--out", help="output CSV path (default stdout)")
        s.add_argument("--check", action="store_true", help="compare against bundled reference tables")
        s.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
    return p


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    fn, schema, presets = COMMANDS[args.command]
    try:
        raw = read_config(args.config) if args.config else {}
        raw.update(parse_overrides(args.set))
        if args.out:
            raw["out"] = args.out
        if args.threads is not None:
            raw["threads"] = str(args.threads)
        if os.environ.get(SEED_ENV):
            raw["seed"] = os.environ[SEED_ENV]
        cfg = resolve(schema, raw, presets)
        if cfg["threads"] < 0:
            raise ConfigError("key 'threads' must be >= 0")
        if args.command == "js-figure":
            cfg = _js_figure_cfg(cfg)
        header, rows = fn(cfg, args.check)
    except (ConfigError, InvalidInputError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConvergenceError, RankDeficientError, StudyAbortedError, np.linalg.LinAlgError,
            AssertionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if cfg["out"] in ("-", ""):
        write_csv(header, rows, stdout)
    else:
        with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
            write_csv(header, rows, fh)
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
