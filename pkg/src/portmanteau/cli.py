"""Batch experiment runner.

Subcommands::

    portmanteau run CONFIG [--seed S] [--replicates R] [--out DIR]
    portmanteau plot-data RESULTS_DIR --kind KIND [--out FILE]
    portmanteau validate-config CONFIG
    portmanteau list-experiments

Exit status is 0 on success, 2 for configuration errors and 3 for runtime
failures.  ``THREADS`` sets the worker count; results do not depend on it.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from . import __version__
from .bounds import (DiscreteGrid, MixedTarget, VectorFunctional, depoisson_coefficient,
                     estimate_coefficients, first_chaos_functional, rho_n, ustat_gaussian_bound,
                     ustat_poisson_bound, window_functional)
from .chaos import (UStatistic, hoeffding_projection, multiple_integral_eval, product_formula_rhs,
                    verify_isometry)
from .geomgraph import GraphPattern, RegimeSpec, run_mixed_experiment
from .kernel_algebra import DiscreteMeasure, SymKernel, norm, symmetrize
from .poisson_space import replicate_rng, sample_configuration
from .stein import ChenSteinSolution, stein_factors

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

KINDS = {
    "coefficients": "the six mixed-bound coefficients for window counts and first-chaos integrals",
    "graph-mixed": "disk-graph counts in the mixed Poisson/Gaussian regime over an n grid",
    "ustat-bounds": "U-statistic Gaussian and Poisson bounds and de-poissonization weights",
    "stein-verify": "Chen-Stein solutions: Stein residuals and difference sup norms",
    "chaos-verify": "product formula residuals and isometry checks on random kernels",
}

SCHEMA = {
    "type": "object",
    "required": ["kind", "seed"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": sorted(KINDS)},
        "seed": {"type": "integer", "minimum": 0},
        "replicates": {"type": "integer", "minimum": 2},
        "n_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "z_grid": {"type": ["integer", "string"]},
        "output": {"type": "string"},
        "params": {"type": "object"},
    },
}

PATTERNS = {
    "edge": GraphPattern.edge,
    "triangle": GraphPattern.triangle,
    "path3": lambda: GraphPattern.path(3),
    "path4": lambda: GraphPattern.path(4),
    "star4": lambda: GraphPattern.star(4),
    "cycle4": lambda: GraphPattern.cycle(4),
    "K4": lambda: GraphPattern.complete(4),
}


class ConfigError(Exception):
    pass


def version_string() -> str:
    """Package version, with ``git describe`` appended when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    validate(cfg, path)
    return cfg


def validate(cfg, source: str = "config") -> None:
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        msgs = []
        for e in errors:
            field = "/".join(str(p) for p in e.path) or "<root>"
            msgs.append(f"{source}: field {field}: {e.message}")
        raise ConfigError("\n".join(msgs))


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def _csv_text(columns: List[str], rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------- experiment kinds

def _space(params) -> DiscreteMeasure:
    return DiscreteMeasure(params.get("weights", [0.5, 1.0, 0.75, 0.25]))


def _chaos_verify(cfg, threads):
    p = cfg.get("params", {})
    seed = cfg["seed"]
    space = _space(p)
    reps = cfg.get("replicates", 2000)
    n_configs = int(p.get("configs", 200))
    rng = replicate_rng(seed, 0, 99)
    M = space.cell_count
    kernels = {q: symmetrize(rng.uniform(-2, 2, (M,) * q), space) for q in (1, 2)}
    rows = []
    for q, qq in ((1, 1), (1, 2), (2, 2)):
        f, g = kernels[q], kernels[qq]
        res = 0.0
        measure = space.control_measure()
        for r in range(n_configs):
            config = sample_configuration(measure, replicate_rng(seed, r, 1))
            lhs = multiple_integral_eval(f, config) * multiple_integral_eval(g, config)
            res = max(res, abs(lhs - product_formula_rhs(f, g, config)))
        iso = verify_isometry(f, g, replicates=reps, seed=seed)
        rows.append(dict(p=q, q=qq, product_residual=res, isometry_cov=iso.cross,
                         isometry_target=iso.target, isometry_se=iso.cross_se,
                         isometry_z=iso.z_scores()[2], passed=bool(res < 1e-8 and iso.passed)))
    cols = ["p", "q", "product_residual", "isometry_cov", "isometry_target", "isometry_se",
            "isometry_z", "passed"]
    return {"results.csv": (cols, rows)}


def _stein_verify(cfg, threads):
    p = cfg.get("params", {})
    lambdas = p.get("lambdas", [0.25, 0.5, 1, 2, 5])
    trials = int(p.get("trials", 50))
    xmax = int(p.get("xmax", 200))
    rows = []
    for a, lam in enumerate(lambdas):
        rng = replicate_rng(cfg["seed"], a, 5)
        worst = [0.0, 0.0, 0.0, 0.0]
        for _ in range(trials):
            psi = rng.uniform(-1, 1, xmax + 400)
            sol = ChenSteinSolution(lam, psi, xmax)
            worst[0] = max(worst[0], float(np.max(np.abs(sol.residual()))))
            for i, v in enumerate(sol.differences()):
                worst[i + 1] = max(worst[i + 1], v)
        fac = stein_factors(lam)
        rows.append(dict(lam=lam, max_residual=worst[0], sup_f=worst[1], sup_df=worst[2],
                         sup_d2f=worst[3], factor_f=fac[0], factor_df=fac[1], factor_d2f=fac[2],
                         within_f=worst[1] <= fac[0], within_df=worst[2] <= fac[1],
                         within_d2f=worst[3] <= fac[2]))
    cols = ["lam", "max_residual", "sup_f", "sup_df", "sup_d2f", "factor_f", "factor_df",
            "factor_d2f", "within_f", "within_df", "within_d2f"]
    return {"results.csv": (cols, rows)}


def _coefficients(cfg, threads):
    p = cfg.get("params", {})
    space = _space(p)
    windows = p.get("windows", [[0, 1]])
    gauss = p.get("gaussian", [])
    if not windows:
        raise ConfigError("field params/windows: need at least one window")
    F = [window_functional(space, w) for w in windows]
    lambdas = [float(np.dot(space.weights, space.indicator(w))) for w in windows]
    G = []
    for cells in gauss:
        ind = space.indicator(cells)
        h = ind / math.sqrt(float(np.dot(space.weights, ind)))
        G.append(first_chaos_functional(SymKernel(h, space)))
    C = np.array([[float(np.dot(space.weights, g.decomposition.projections[0].values
                                * h.decomposition.projections[0].values)) for h in G] for g in G])
    V = VectorFunctional(F, G)
    rep = estimate_coefficients(V, MixedTarget(lambdas, C if G else None), cfg.get("replicates", 1000),
                                cfg["seed"], DiscreteGrid(space), threads)
    row = json.loads(rep.to_json())
    cols = list(row)
    return {"results.csv": (cols, [row])}


def _ustat_bounds(cfg, threads):
    p = cfg.get("params", {})
    space = _space(p)
    k = int(p.get("order", 2))
    cells = p.get("cells", [0, 1])
    sigma = float(p.get("sigma", 1.0))
    lam = float(p.get("lambda", 1.0))
    D = float(p.get("Dconst", 1.0))
    kern = SymKernel.indicator_power(space, cells, k)
    U = UStatistic(k, kern)
    projs = [hoeffding_projection(U, i) for i in range(1, k + 1)]
    rows = [dict(quantity="B", n="NA", l="NA", value=ustat_gaussian_bound(projs, sigma))]
    O = kern.values > 0
    rho = rho_n(O, space)
    lam_n = float(kern.marginal(0))
    rows.append(dict(quantity="rho", n="NA", l="NA", value=rho))
    rows.append(dict(quantity="A", n="NA", l="NA", value=ustat_poisson_bound(lam_n, lam, rho, D)))
    for n in cfg.get("n_grid", [10, 100, 1000, 10000]):
        for l in range(0, 4):
            if l <= n:
                rows.append(dict(quantity="b", n=int(n), l=l, value=depoisson_coefficient(int(n), l)))
    return {"results.csv": (["quantity", "n", "l", "value"], rows)}


def _graph_mixed(cfg, threads):
    p = cfg.get("params", {})
    try:
        pattern0 = PATTERNS[p.get("pattern0", "edge")]()
        patterns = [PATTERNS[name]() for name in p.get("patterns", ["triangle", "path3"])]
    except KeyError as exc:
        raise ConfigError(f"field params/patterns: unknown pattern {exc.args[0]!r}; "
                          f"choose from {sorted(PATTERNS)}")
    try:
        spec = RegimeSpec(k0=pattern0.order, k=patterns[0].order, pattern0=pattern0, patterns=patterns,
                          m=int(p.get("m", 1)), radius_constant=float(p.get("radius_constant", 1.0)))
    except ValueError as exc:
        raise ConfigError(f"field params: {exc}")
    n_grid = cfg.get("n_grid", [250, 1000, 4000, 16000])
    res = run_mixed_experiment(spec, n_grid, cfg.get("replicates", 2000), cfg["seed"],
                               int(p.get("dictionary_size", 9)), bootstrap=int(p.get("bootstrap", 20)))
    fit_cols = ["quantity", "slope", "intercept", "slope_se"]
    return {"results.csv": (list(res.COLUMNS), res.rows), "fits.csv": (fit_cols, res.fits)}


RUNNERS = {
    "chaos-verify": _chaos_verify,
    "stein-verify": _stein_verify,
    "coefficients": _coefficients,
    "ustat-bounds": _ustat_bounds,
    "graph-mixed": _graph_mixed,
}


def run(cfg: dict, out_dir: Optional[str] = None, threads: int = 1) -> List[Path]:
    """Execute a validated config and write CSV tables plus ``manifest.json``."""
    out = Path(out_dir or cfg.get("output") or "results")
    seed = cfg["seed"]
    version = version_string()
    t0 = time.time()
    tables = RUNNERS[cfg["kind"]](cfg, threads)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for name, (cols, rows) in tables.items():
            full = [dict(r, seed=seed, version=version) for r in rows]
            path = out / name
            extra = [c for c in ("seed", "version") if c not in cols]
            path.write_text(_csv_text(cols + extra, full))
            written.append(path)
        manifest = dict(config=cfg, version=version, seed=seed, wall_time=time.time() - t0,
                        outputs=[p.name for p in written])
        mpath = out / "manifest.json"
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written.append(mpath)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return written


# ---------------------------------------------------------------- plot data

PLOTS = {
    "tv-vs-n": ("tv", None),
    "h1-vs-n": ("h1", "se_h1"),
    "w1-vs-n": ("w1", None),
    "cov-vs-n": ("cov_0j", "se_cov"),
    "mean-vs-n": ("mean", "se_mean"),
}


def _num(s):
    try:
        v = float(s)
    except (TypeError, ValueError):
        return math.nan
    return v


def plot_data(results: str, kind: str) -> str:
    """Tidy ``(x, y, series, se)`` rows; log-log fits appended as slope/intercept rows."""
    if kind not in PLOTS:
        raise ConfigError(f"unknown plot kind {kind!r}; choose from {sorted(PLOTS)}")
    col, se_col = PLOTS[kind]
    path = Path(results)
    if path.is_dir():
        path = path / "results.csv"
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    out, seen = [], set()
    series: Dict[str, List] = {}
    for r in rows:
        y = _num(r.get(col))
        if math.isnan(y):
            continue
        name = col if kind in ("tv-vs-n", "h1-vs-n", "w1-vs-n") else f"{col}:{r.get('pattern')}"
        key = (name, r.get("n"))
        if key in seen:
            continue
        seen.add(key)
        se = _num(r.get(se_col)) if se_col else math.nan
        x = _num(r.get("n"))
        out.append(dict(x=x, y=y, series=name, se=se))
        series.setdefault(name, []).append((x, y))
    for name, pts in series.items():
        xs = np.array([p[0] for p in pts])
        ys = np.abs(np.array([p[1] for p in pts]))
        if xs.size >= 2 and np.all(ys > 0):
            coef, cov = (np.polyfit(np.log(xs), np.log(ys), 1, cov=True) if xs.size > 2
                         else (np.polyfit(np.log(xs), np.log(ys), 1), np.full((2, 2), np.nan)))
            out.append(dict(x=math.nan, y=coef[0], series=f"{name}:fitted_slope", se=math.sqrt(cov[0, 0])))
            out.append(dict(x=math.nan, y=coef[1], series=f"{name}:fitted_intercept", se=math.sqrt(cov[1, 1])))
    return _csv_text(["x", "y", "series", "se"], out)


# ---------------------------------------------------------------- entry point

def _parser():
    ap = argparse.ArgumentParser(prog="portmanteau", description="Mixed Poisson/Gaussian bound experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--replicates", type=int)
    r.add_argument("--out")
    p = sub.add_parser("plot-data", help="emit tidy plot data from a results directory")
    p.add_argument("results")
    p.add_argument("--kind", required=True)
    p.add_argument("--out")
    v = sub.add_parser("validate-config", help="check a config without running it")
    v.add_argument("config")
    sub.add_parser("list-experiments", help="list experiment kinds")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "list-experiments":
            for k in sorted(KINDS):
                print(f"{k}\t{KINDS[k]}")
            return EXIT_OK
        if args.command == "validate-config":
            load_config(args.config)
            print(f"{args.config}: ok")
            return EXIT_OK
        if args.command == "plot-data":
            text = plot_data(args.results, args.kind)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.replicates is not None:
            cfg["replicates"] = args.replicates
        validate(cfg, args.config)
        try:
            threads = int(os.environ.get("THREADS", "1"))
        except ValueError:
            raise ConfigError(f"THREADS={os.environ['THREADS']!r} is not an integer")
        written = run(cfg, args.out, max(1, threads))
        for p in written:
            print(p)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to one exit status
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
