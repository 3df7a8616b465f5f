"""Command-line entry point: ``membrane4d <command> [flags]``.

Every command is non-interactive. Failures print one JSON line to stderr
(``{"error": kind, "exit_code": n, "message": ...}``) and exit with 2 for
bad usage, 3 for solver failures and 4 for I/O problems.

Outputs are byte-identical for a fixed seed whatever ``--threads`` is;
``--timing`` opts into recording wall time, which breaks that.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .biharmonic import SolverError
from .extremes import (
    extract_extremal_process,
    derivative_martingale,
    level_set,
    pair_max,
    standard_bump,
    bump_test_function,
    top_ell_sum,
    write_point_process,
)
from .field import DysonParams, Field, centering_constant, write_field
from .harness import (
    CONSTANTS,
    ExperimentConfig,
    ReplicateError,
    combined_se,
    dyson_experiment,
    empirical_cov,
    estimate_entry,
    geometry_experiment,
    intensity_experiment,
    map_replicates,
    membrane_solver,
    results_document,
    sample_sites,
    validate_results,
    write_results,
)
from .hierarchical import DyadicDepth, brw_cov, mbrw_cov
from .rng import auxiliary, stream

EXIT_USAGE, EXIT_SOLVER, EXIT_IO = 2, 3, 4
SEED_ENV = "MBR4_SEED"
COMMANDS = ("sample", "cov-check", "extremes", "dyson-check", "geometry", "intensity", "report")


class UsageError(ValueError):
    pass


# --- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors print the usage text plus the JSON error line, exit 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", EXIT_USAGE, f"{self.prog}: {message}")
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(p: argparse.ArgumentParser, reps: int, field=True) -> None:
    p.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--reps", type=int, default=reps, help="replicate count")
    p.add_argument("--timing", action="store_true", help="record wall time in outputs")
    if field:
        p.add_argument("--field", choices=("membrane", "brw", "mbrw"), default="membrane")
        p.add_argument("--n-side", dest="n_side", type=int, help="box side N")
        p.add_argument("--depth", type=int, help="dyadic depth n (N = 2**n)")
        p.add_argument("--solver", choices=("dense", "sparse", "iterative"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="membrane4d",
                     description="4D membrane model extremes lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, help="TOML file of flag defaults (flags win)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("sample", help="write binary field samples")
    _common(p, reps=1)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("cov-check", help="empirical vs exact covariances")
    _common(p, reps=5000)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--out", type=Path, default=Path("cov-check.json"))

    p = sub.add_parser("extremes", help="extremal process CSVs and summary statistics")
    _common(p, reps=1, field=False)
    p.add_argument("--n-side", dest="n_side", type=int, required=False)
    p.add_argument("--solver", choices=("dense", "sparse", "iterative"))
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--lam", type=float, default=2.0)
    p.add_argument("--ell", type=int, default=4)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("dyson-check", help="Laplace functional of f vs f_t")
    _common(p, reps=2000, field=False)
    p.add_argument("--n-side", dest="n_side", type=int, default=16)
    p.add_argument("--solver", choices=("dense", "sparse", "iterative"))
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--bump", type=float, nargs=3, metavar=("CENTER", "HALF_WIDTH", "AMPLITUDE"),
                   help="bump test function (default: the standard bump)")
    p.add_argument("--out", type=Path, default=Path("dyson-check.json"))

    p = sub.add_parser("geometry", help="violating-pair probabilities per r")
    _common(p, reps=500, field=False)
    p.add_argument("--n-side", dest="n_side", type=int, default=32)
    p.add_argument("--solver", choices=("dense", "sparse", "iterative"))
    p.add_argument("--rs", type=_int_list, default=[3, 4, 6])
    p.add_argument("--c", type=float, default=CONSTANTS["geometry_c_default"])
    p.add_argument("--out", type=Path, default=Path("geometry.csv"))
    p.add_argument("--json", type=Path, help="also write a results JSON")

    p = sub.add_parser("intensity", help="exponential tail rate of local-maximum heights")
    _common(p, reps=2000, field=False)
    p.add_argument("--n-side", dest="n_side", type=int, default=16)
    p.add_argument("--solver", choices=("dense", "sparse", "iterative"))
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--threshold-offset", dest="threshold_offset", type=float,
                   default=CONSTANTS["intensity_threshold_offset_default"])
    p.add_argument("--out", type=Path, default=Path("intensity.json"))

    p = sub.add_parser("report", help="Markdown summary of results JSON files")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("report.md"))
    return parser


def _load_toml(path: Path) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            defaults = _load_toml(args.config)
        except OSError as exc:
            raise _IOFailure(str(exc))
        except ValueError as exc:
            parser.error(f"bad config file: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "seed", 0) is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            parser.error(f"{SEED_ENV} must be an integer, got {env!r}")
    if getattr(args, "threads", 1) is None:
        args.threads = os.cpu_count() or 1
    return args


class _IOFailure(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def _config(args, experiment: str, **extra) -> ExperimentConfig:
    field = getattr(args, "field", "membrane")
    N, n = getattr(args, "n_side", None), getattr(args, "depth", None)
    if field == "membrane" and N is None:
        if n is None:
            raise UsageError("--n-side is required")
        N = 2**n
    try:
        return ExperimentConfig(experiment=experiment, field=field, N=N,
                                n=n if field != "membrane" else None,
                                replicates=args.reps, seed=args.seed,
                                solver=getattr(args, "solver", None),
                                threads=args.threads, **extra)
    except ValueError as exc:
        raise UsageError(str(exc))


def _wall(args, t0: float):
    return round(time.perf_counter() - t0, 3) if args.timing else None


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- commands ----------------------------------------------------------------

def cmd_sample(args) -> None:
    cfg = _config(args, "sample")
    out = _mkdir(args.out)
    for i, values in enumerate(map_replicates(cfg, lambda h: h.copy())):
        write_field(Field(cfg.lattice, values, cfg.field, stream(cfg.seed, i).key),
                    out / f"field_{i:05d}.mbr4")


def _cov_oracle(cfg: ExperimentConfig):
    if cfg.field == "membrane":
        handle = membrane_solver(cfg.N, cfg.solver)
        lat = cfg.lattice
        return lambda u, v: handle.green_entry(lat.index(u), lat.index(v))
    depth = DyadicDepth(cfg.n)
    if cfg.field == "brw":
        return lambda u, v: float(brw_cov(u, v, depth))
    return lambda u, v: mbrw_cov(u, v, depth)


def cmd_cov_check(args) -> None:
    t0 = time.perf_counter()
    cfg = _config(args, "cov-check")
    if args.pairs < 1:
        raise UsageError("--pairs must be positive")
    lat = cfg.lattice
    # hierarchical fields live on the torus: draw sites from [0, N)^4
    hi = cfg.N + 1 if cfg.field == "membrane" else cfg.N
    gen = auxiliary(cfg.seed, 1)
    pairs = [tuple(map(tuple, gen.integers(0, hi, size=(2, 4)))) for _ in range(args.pairs)]
    sites = sorted({lat.index(p) for pair in pairs for p in pair})
    col = {s: j for j, s in enumerate(sites)}
    samples = sample_sites(cfg, sites)
    flat_pairs = [(col[lat.index(u)], col[lat.index(v)]) for u, v in pairs]
    est, se = empirical_cov(samples, flat_pairs)
    oracle = _cov_oracle(cfg)
    entries = []
    worst = 0.0
    for (u, v), e, s in zip(pairs, est, se):
        exact = oracle(u, v)
        z = abs(e - exact) / s if s > 0 else (0.0 if e == exact else math.inf)
        worst = max(worst, z)
        entries.append(estimate_entry(f"cov{list(map(int, u))}{list(map(int, v))}", e, s,
                                      cfg.replicates, exact=float(exact), z=float(z),
                                      u=[int(a) for a in u], v=[int(a) for a in v]))
    doc = results_document("cov-check", cfg, entries, _wall(args, t0),
                           max_abs_z=float(worst), within_4se=bool(worst <= 4.0))
    write_results(doc, args.out)


def cmd_extremes(args) -> None:
    t0 = time.perf_counter()
    if args.n_side is None:
        raise UsageError("--n-side is required")
    cfg = _config(args, "extremes", r=args.r, lam=args.lam, ell=args.ell)
    out = _mkdir(args.out)
    N = cfg.N
    mN = centering_constant(N)

    def stat(h):
        diamond = pair_max(h, cfg.r, N)
        return {
            "values": h.copy(),
            "pp": extract_extremal_process(h, cfg.r, N),
            "max_minus_mN": float(h.max() - mN),
            "level_set_size": float(len(level_set(h, cfg.lam, N))),
            "h_diamond": None if diamond is None else float(diamond.value),
            "top_ell_sum": top_ell_sum(h, cfg.ell),
            "derivative_martingale": derivative_martingale(h, N),
        }

    rows = map_replicates(cfg, stat)
    per_rep = []
    for i, row in enumerate(rows):
        write_field(Field(cfg.lattice, row["values"], "membrane", stream(cfg.seed, i).key),
                    out / f"field_{i:05d}.mbr4")
        write_point_process(row["pp"], out / f"atoms_{i:05d}.csv")
        per_rep.append({k: v for k, v in row.items() if k not in ("values", "pp")}
                       | {"replicate": i, "atoms": len(row["pp"])})
    names = ["max_minus_mN", "level_set_size", "h_diamond", "top_ell_sum",
             "derivative_martingale", "atoms"]
    entries = []
    for name in names:
        vals = [r[name] for r in per_rep if r[name] is not None]
        if vals:
            m, s = _mean_se(vals)
            entries.append(estimate_entry(name, m, s, len(vals)))
    doc = results_document("extremes", cfg, entries, _wall(args, t0), replicates=per_rep)
    write_results(doc, out / "summary.json")


def cmd_dyson_check(args) -> None:
    t0 = time.perf_counter()
    cfg = _config(args, "dyson-check", r=args.r, t=args.t)
    try:
        DysonParams(cfg.t, cfg.N)
        f = standard_bump() if args.bump is None else bump_test_function(*args.bump)
    except ValueError as exc:
        raise UsageError(str(exc))
    lhs, rhs = dyson_experiment(cfg, f)
    cse = combined_se(lhs, rhs)
    gap = abs(lhs.estimate - rhs.estimate)
    entries = [
        estimate_entry("lhs", lhs.estimate, lhs.std_error, lhs.replicates),
        estimate_entry("rhs", rhs.estimate, rhs.std_error, rhs.replicates),
        estimate_entry("gap", gap, cse, lhs.replicates),
    ]
    bump = {"support": [f.hmin, f.hmax], "amplitude": float(f(np.full(4, 0.5), (f.hmin + f.hmax) / 2))}
    doc = results_document("dyson-check", cfg, entries, _wall(args, t0),
                           test_function=bump, combined_se=cse)
    write_results(doc, args.out)


def cmd_geometry(args) -> None:
    t0 = time.perf_counter()
    if any(r <= math.e for r in args.rs):
        raise UsageError("every r must exceed e (r >= 3)")
    cfg = _config(args, "geometry", c=args.c)
    res = geometry_experiment(cfg, tuple(args.rs))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "probability", "std_error", "replicates"])
        for r, e in res.items():
            w.writerow([r, repr(e.estimate), repr(e.std_error), e.replicates])
    if args.json is not None:
        entries = [estimate_entry(f"P(violation) r={r}", e.estimate, e.std_error, e.replicates,
                                  r=r) for r, e in res.items()]
        write_results(results_document("geometry", cfg, entries, _wall(args, t0)), args.json)


def cmd_intensity(args) -> None:
    t0 = time.perf_counter()
    cfg = _config(args, "intensity", r=args.r, threshold_offset=args.threshold_offset)
    fit = intensity_experiment(cfg)
    entries = [estimate_entry("rate", fit.rate, fit.std_error, cfg.replicates,
                              exceedances=fit.exceedances, threshold=fit.threshold)]
    write_results(results_document("intensity", cfg, entries, _wall(args, t0),
                                   target=CONSTANTS["intensity_rate_target"]), args.out)


def render_report(docs: list[tuple[str, dict]]) -> str:
    """Markdown summary of results documents; a pure function of its input."""
    lines = ["# membrane4d results", ""]
    for name, doc in docs:
        lines.append(f"## {doc['experiment']} ({name})")
        lines.append("")
        cfg = doc.get("config", {})
        shown = ", ".join(f"{k}={cfg[k]}" for k in sorted(cfg) if cfg[k] is not None)
        lines.append(f"seed {doc['seed']}; git {doc['git_describe']}; {shown}")
        lines.append("")
        lines.append("| estimate | value | SE | replicates |")
        lines.append("|---|---|---|---|")
        for e in doc["estimates"]:
            lines.append(f"| {e['name']} | {e['value']:.6g} | {e['std_error']:.3g} "
                         f"| {e['replicates']} |")
        lines.append("")
    consts = docs[0][1].get("constants") if docs else None
    if consts:
        lines.append("## constants")
        lines.append("")
        for k in sorted(consts):
            lines.append(f"- {k}: {consts[k]}")
        lines.append("")
    return "\n".join(lines)


def cmd_report(args) -> None:
    docs = []
    for path in args.inputs:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}: not JSON ({exc})")
        try:
            validate_results(doc)
        except Exception as exc:
            raise UsageError(f"{path}: does not match the results schema")
        docs.append((path.name, doc))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(render_report(docs))


HANDLERS = {
    "sample": cmd_sample,
    "cov-check": cmd_cov_check,
    "extremes": cmd_extremes,
    "dyson-check": cmd_dyson_check,
    "geometry": cmd_geometry,
    "intensity": cmd_intensity,
    "report": cmd_report,
}


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except _IOFailure as exc:
        return _fail("io", EXIT_IO, str(exc))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        HANDLERS[args.command](args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except (SolverError, ReplicateError) as exc:
        return _fail("solver", EXIT_SOLVER, str(exc))
    except OSError as exc:
        return _fail("io", EXIT_IO, str(exc))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
